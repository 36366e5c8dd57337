use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::partition::{GridLayout, WindowLayout};
use crate::tensor::{Dims, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(d: Dims, r: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::uniform(d, -1.0, 1.0, r)
}

/// Loop-by-loop channel attention on `B×c×p×p` windows.
fn channel_attention_oracle(q: &Tensor4, k: &Tensor4, v: &Tensor4, wt: &Tensor4, alpha: &[f64]) -> Tensor4 {
    let d = q.dims();
    let heads = wt.dims().c;
    let hd = d.c / heads;
    let t = d.h * d.w;
    let mut out = Tensor4::zeros(d);
    for b in 0..d.n {
        for h in 0..heads {
            let a = if alpha.len() == 1 { alpha[0] } else { alpha[h] };
            let norm = |src: &Tensor4, ch: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..t)
                    .map(|i| wt.at(0, h, i / d.w, i % d.w) * src.at(b, ch, i / d.w, i % d.w))
                    .collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|x| x / n).collect()
            };
            for i in 0..hd {
                let qi = norm(q, h * hd + i);
                let mut logits = vec![0.0; hd];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = norm(k, h * hd + j);
                    *l = qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / a;
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for p in 0..t {
                    let mut acc = 0.0;
                    for j in 0..hd {
                        acc += e[j] / z * v.at(b, h * hd + j, p / d.w, p % d.w);
                    }
                    out.data_mut()[d.index(b, h * hd + i, p / d.w, p % d.w)] = acc;
                }
            }
        }
    }
    out
}

fn pointwise_oracle(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
    let d = x.dims();
    let co = w.dims().n;
    Tensor4::from_fn(Dims::new(d.n, co, d.h, d.w), |n, o, y, xx| {
        b.data()[o] + (0..d.c).map(|i| w.at(o, i, 0, 0) * x.at(n, i, y, xx)).sum::<f64>()
    })
}

#[test]
fn channel_attention_matches_loop_oracle() {
    let mut r = rng(1);
    for trial in 0..50 {
        let heads = [1, 2, 4][trial % 3];
        let hd = [1, 2, 8][(trial / 3) % 3];
        let p = [2, 4, 8][(trial / 9) % 3];
        let b = 1 + trial % 2;
        let d = Dims::new(b, heads * hd, p, p);
        let (q, k, v) = (rand_t(d, &mut r), rand_t(d, &mut r), rand_t(d, &mut r));
        let wt = Tensor4::uniform(Dims::new(1, heads, p, p), 0.2, 1.5, &mut r);
        let alpha: Vec<f64> = (0..heads).map(|_| r.random_range(0.3..2.0)).collect();
        let got = channel_attention_window(&q, &k, &v, &wt, &alpha).unwrap();
        let want = channel_attention_oracle(&q, &k, &v, &wt, &alpha);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "trial {trial}");
    }
}

#[test]
fn single_channel_head_passes_values_through() {
    let mut r = rng(2);
    let d = Dims::new(2, 3, 4, 4);
    let (q, k, v) = (rand_t(d, &mut r), rand_t(d, &mut r), rand_t(d, &mut r));
    let wt = Tensor4::ones(Dims::new(1, 3, 4, 4));
    let got = channel_attention_window(&q, &k, &v, &wt, &[0.7]).unwrap();
    assert!(got.max_abs_diff(&v).unwrap() < 1e-15);
}

#[test]
fn huge_temperature_averages_channels() {
    let mut r = rng(3);
    let d = Dims::new(1, 4, 2, 2);
    let (q, k, v) = (rand_t(d, &mut r), rand_t(d, &mut r), rand_t(d, &mut r));
    let wt = Tensor4::ones(Dims::new(1, 1, 2, 2));
    let got = channel_attention_window(&q, &k, &v, &wt, &[1e300]).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            let mean = (0..4).map(|c| v.at(0, c, y, x)).sum::<f64>() / 4.0;
            for c in 0..4 {
                assert!((got.at(0, c, y, x) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rescaled_queries_leave_output_unchanged() {
    let mut r = rng(4);
    let d = Dims::new(2, 4, 4, 4);
    let (q, k, v) = (rand_t(d, &mut r), rand_t(d, &mut r), rand_t(d, &mut r));
    let wt = Tensor4::uniform(Dims::new(1, 2, 4, 4), 0.5, 1.5, &mut r);
    let a = channel_attention_window(&q, &k, &v, &wt, &[1.0, 0.5]).unwrap();
    let b = channel_attention_window(&q.map(|x| 3.7 * x), &k.map(|x| 0.2 * x), &v, &wt, &[1.0, 0.5]).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn window_order_does_not_matter() {
    let mut r = rng(5);
    let d = Dims::new(4, 4, 2, 2);
    let (q, k, v) = (rand_t(d, &mut r), rand_t(d, &mut r), rand_t(d, &mut r));
    let wt = Tensor4::ones(Dims::new(1, 2, 2, 2));
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor4| {
        let s = d.c * 4;
        let data: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * s..(i + 1) * s].to_vec()).collect();
        Tensor4::from_vec(d, data).unwrap()
    };
    let a = channel_attention_window(&q, &k, &v, &wt, &[1.0]).unwrap();
    let b = channel_attention_window(&permute(&q), &permute(&k), &permute(&v), &wt, &[1.0]).unwrap();
    assert_eq!(permute(&a), b);
}

#[test]
fn rejects_non_positive_temperature() {
    let d = Dims::new(1, 2, 2, 2);
    let t = Tensor4::<f64>::ones(d);
    let wt = Tensor4::ones(Dims::new(1, 1, 2, 2));
    assert!(channel_attention_window(&t, &t, &t, &wt, &[0.0]).is_err());
}

#[test]
fn qkv_with_identity_projection_replicates_input() {
    let mut r = rng(6);
    let c = 3;
    let mut p = FcsaParams::random(c, 1, 4, AlphaMode::PerHead, &mut r).unwrap();
    p.qkv_pw_weight = Tensor4::from_fn(Dims::new(3 * c, c, 1, 1), |o, i, _, _| f64::from(u8::from(o % c == i)));
    p.qkv_pw_bias = Tensor4::zeros(Dims::new(1, 3 * c, 1, 1));
    p.qkv_dw_weight = Tensor4::from_fn(Dims::new(3 * c, 1, 3, 3), |_, _, y, x| f64::from(u8::from(y == 1 && x == 1)));
    p.qkv_dw_bias = Tensor4::zeros(Dims::new(1, 3 * c, 1, 1));
    let x = rand_t(Dims::new(1, c, 4, 4), &mut r);
    for t in fcsa_qkv(&x, &p).unwrap() {
        assert_eq!(t, x);
    }
}

#[test]
fn fcsa_top_branch_only_when_bottom_weight_zero() {
    let mut r = rng(7);
    let mut p = FcsaParams::random(4, 2, 4, AlphaMode::PerHead, &mut r).unwrap();
    let x = rand_t(Dims::new(1, 4, 8, 8), &mut r);
    p.w_top = Tensor4::ones(p.w_top.dims());
    p.w_bottom = Tensor4::zeros(p.w_bottom.dims());
    let both = fcsa_forward(&x, &p, WindowLayout::new(4, 2)).unwrap();
    let unshifted = fcsa_forward(&x, &p, WindowLayout::new(4, 0)).unwrap();
    // With the bottom weight zeroed, the shift amount is irrelevant.
    assert!(both.max_abs_diff(&unshifted).unwrap() < 1e-14);
}

#[test]
fn fcsa_identical_branches_average_to_one() {
    let mut r = rng(8);
    let p = FcsaParams::random(4, 2, 4, AlphaMode::PerHead, &mut r).unwrap();
    let x = rand_t(Dims::new(1, 4, 8, 8), &mut r);
    let merged = fcsa_forward(&x, &p, WindowLayout::new(4, 0)).unwrap();
    let mut single = p.clone();
    single.w_top = Tensor4::ones(p.w_top.dims());
    single.w_bottom = Tensor4::zeros(p.w_bottom.dims());
    let one = fcsa_forward(&x, &single, WindowLayout::new(4, 0)).unwrap();
    assert!(merged.max_abs_diff(&one).unwrap() < 1e-13);
}

#[test]
fn fcsa_single_window_is_whole_map_channel_attention() {
    let mut r = rng(9);
    let (c, heads, p) = (6, 2, 8);
    let mut prm = FcsaParams::random(c, heads, p, AlphaMode::PerHead, &mut r).unwrap();
    prm.w_top = Tensor4::ones(prm.w_top.dims());
    prm.w_bottom = Tensor4::zeros(prm.w_bottom.dims());
    prm.log_alpha = Tensor4::from_f64s(Dims::new(1, 2, 1, 1), &[0.3, -0.2]).unwrap();
    let x = rand_t(Dims::new(1, c, p, p), &mut r);
    let got = fcsa_forward(&x, &prm, WindowLayout::shifted(p)).unwrap();

    let [q, k, v] = fcsa_qkv(&x, &prm).unwrap();
    let wt = Tensor4::ones(Dims::new(1, heads, p, p));
    let alpha = [0.3f64.exp(), (-0.2f64).exp()];
    let attn = channel_attention_oracle(&q, &k, &v, &wt, &alpha);
    let want = pointwise_oracle(&attn, &prm.out_pw_weight, &prm.out_pw_bias);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn fcsa_crops_maps_for_small_windows() {
    let mut r = rng(10);
    let p = FcsaParams::random(4, 2, 8, AlphaMode::Global, &mut r).unwrap();
    assert_eq!(p.log_alpha.dims(), Dims::new(1, 1, 1, 1));
    let x = rand_t(Dims::new(1, 4, 4, 4), &mut r);
    let y = fcsa_forward(&x, &p, WindowLayout::shifted(4)).unwrap();
    assert_eq!(y.dims(), x.dims());
    assert!(fcsa_forward(&x, &p, WindowLayout::shifted(3)).is_err());
}

#[test]
fn fcsa_workspace_rows_sum_to_one() {
    let mut r = rng(11);
    let p = FcsaParams::random(4, 2, 4, AlphaMode::PerHead, &mut r).unwrap();
    let x = rand_t(Dims::new(1, 4, 8, 8), &mut r);
    let [top, bottom] = fcsa_workspace(&x, &p, WindowLayout::shifted(4)).unwrap();
    assert_eq!(top.attn.dims(), Dims::new(4, 2, 2, 2));
    for ws in [top, bottom] {
        for row in ws.attn.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn position_index_for_two_by_two_grid() {
    // tokens (0,0) (0,1) (1,0) (1,1); span 3, centre index 4
    #[rustfmt::skip]
    let want = [
        4, 3, 1, 0,
        5, 4, 2, 1,
        7, 6, 4, 3,
        8, 7, 5, 4,
    ];
    assert_eq!(relative_position_index(2, 2), want);
}

#[test]
fn position_index_symmetry() {
    for g in 1..6 {
        let span = 2 * g - 1;
        let idx = relative_position_index(g, g);
        let t = g * g;
        for i in 0..t {
            assert_eq!(idx[i * t + i], (g - 1) * span + (g - 1));
            for j in 0..t {
                assert!(idx[i * t + j] < span * span);
                assert_eq!(idx[i * t + j] + idx[j * t + i], span * span - 1);
            }
        }
    }
}

#[test]
fn bias_degenerate_and_mismatch() {
    let table: Tensor4 = Tensor4::from_f64s(Dims::new(1, 2, 1, 1), &[0.5, -1.0]).unwrap();
    let b = relative_position_bias(1, &table).unwrap();
    assert_eq!(b.dims(), Dims::new(1, 2, 1, 1));
    assert_eq!(b.data(), &[0.5, -1.0]);
    assert!(relative_position_bias(2, &table).is_err());
}

#[test]
fn ggsa_full_grid_is_dense_spatial_attention() {
    let mut r = rng(12);
    let (c, heads, g) = (4, 2, 4);
    let mut p = GgsaParams::random(c, heads, g, &mut r).unwrap();
    p.bias_table = rand_t(p.bias_table.dims(), &mut r);
    let x = rand_t(Dims::new(1, c, g, g), &mut r);
    let got = ggsa_forward(&x, &p, GridLayout::new(g)).unwrap();

    let qkv = pointwise_oracle(&x, &p.qkv_pw_weight, &p.qkv_pw_bias);
    let hd = c / heads;
    let t = g * g;
    let span = 2 * g - 1;
    let mut attn_out = Tensor4::zeros(x.dims());
    for h in 0..heads {
        for i in 0..t {
            let (iy, ix) = (i / g, i % g);
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    let (jy, jx) = (j / g, j % g);
                    let dot: f64 = (0..hd)
                        .map(|e| qkv.at(0, h * hd + e, iy, ix) * qkv.at(0, c + h * hd + e, jy, jx))
                        .sum();
                    let dy = iy as isize - jy as isize + g as isize - 1;
                    let dx = ix as isize - jx as isize + g as isize - 1;
                    dot / (hd as f64).sqrt() + p.bias_table.at(0, h, 0, dy as usize * span + dx as usize)
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for e in 0..hd {
                let v: f64 = (0..t)
                    .map(|j| (logits[j] - m).exp() / z * qkv.at(0, 2 * c + h * hd + e, j / g, j % g))
                    .sum();
                attn_out.data_mut()[x.dims().index(0, h * hd + e, iy, ix)] = v;
            }
        }
    }
    let want = pointwise_oracle(&attn_out, &p.out_pw_weight, &p.out_pw_bias);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn ggsa_unit_grid_projects_values() {
    let mut r = rng(13);
    let c = 4;
    let p = GgsaParams::random(c, 2, 1, &mut r).unwrap();
    let x = rand_t(Dims::new(1, c, 3, 5), &mut r);
    let got = ggsa_forward(&x, &p, GridLayout::new(1)).unwrap();
    let qkv = pointwise_oracle(&x, &p.qkv_pw_weight, &p.qkv_pw_bias);
    let v = Tensor4::from_fn(x.dims(), |n, ch, y, xx| qkv.at(n, 2 * c + ch, y, xx));
    let want = pointwise_oracle(&v, &p.out_pw_weight, &p.out_pw_bias);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn ggsa_rows_sum_to_one_and_smaller_grid_uses_larger_table() {
    let mut r = rng(14);
    let mut p = GgsaParams::random(4, 2, 4, &mut r).unwrap();
    p.bias_table = rand_t(p.bias_table.dims(), &mut r);
    let x = rand_t(Dims::new(2, 4, 6, 6), &mut r);
    let ws = ggsa_workspace(&x, &p, GridLayout::new(3)).unwrap();
    assert_eq!(ws.attn.dims(), Dims::new(8, 2, 9, 9));
    for row in ws.attn.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&a| a > 0.0 && a <= 1.0));
    }
}
