//! Measurements behind the invariant suite, plus naive loop oracles they
//! compare against. Each `measure_*` function returns raw numbers;
//! [`run_all`] applies the thresholds below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{self, published_targets, SearchSpace};
use crate::attention::{fcsa_forward, fcsa_qkv, ggsa_forward, AlphaMode, FcsaParams, GgsaParams};
use crate::error::Result;
use crate::ffn::{fuse_rep_leffn, hidden_width, leffn_forward, rep_leffn_forward, RepLeffnParams};
use crate::gradcheck;
use crate::network::{Model, ModelConfig};
use crate::partition::{
    cyclic_shift, effective_size, grid_partition, grid_reverse, window_partition, window_reverse, WindowLayout,
};
use crate::tensor::{Dims, Tensor4};

pub const FUSION_TOL_F64: f64 = 1e-10;
pub const FUSION_TOL_F32: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-10;
pub const CALIBRATION_TOL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Naive reference implementations, written loop by loop.
pub mod oracle {
    use crate::tensor::{Dims, Tensor4};

    pub fn pointwise(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
        let d = x.dims();
        Tensor4::from_fn(Dims::new(d.n, w.dims().n, d.h, d.w), |n, o, y, xx| {
            b.data()[o] + (0..d.c).map(|i| w.at(o, i, 0, 0) * x.at(n, i, y, xx)).sum::<f64>()
        })
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Full spatial attention over every pixel pair, with a relative
    /// position bias `table` of shape `1×heads×1×(2G−1)²`.
    pub fn dense_spatial_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4, heads: usize, table: &Tensor4) -> Tensor4 {
        let d = q.dims();
        let hd = d.c / heads;
        let t = d.h * d.w;
        let span = (table.dims().w as f64).sqrt().round() as usize;
        let g = span.div_ceil(2);
        let mut out = Tensor4::zeros(d);
        for b in 0..d.n {
            for h in 0..heads {
                for i in 0..t {
                    let (iy, ix) = (i / d.w, i % d.w);
                    let logits: Vec<f64> = (0..t)
                        .map(|j| {
                            let (jy, jx) = (j / d.w, j % d.w);
                            let dot: f64 = (0..hd)
                                .map(|e| q.at(b, h * hd + e, iy, ix) * k.at(b, h * hd + e, jy, jx))
                                .sum();
                            let ry = iy + g - 1 - jy;
                            let rx = ix + g - 1 - jx;
                            dot / (hd as f64).sqrt() + table.at(0, h, 0, ry * span + rx)
                        })
                        .collect();
                    let a = softmax(&logits);
                    for e in 0..hd {
                        let acc: f64 = (0..t).map(|j| a[j] * v.at(b, h * hd + e, j / d.w, j % d.w)).sum();
                        out.data_mut()[d.index(b, h * hd + e, iy, ix)] = acc;
                    }
                }
            }
        }
        out
    }

    /// Channel-to-channel attention over the whole map with L2-normalized
    /// queries and keys and per-head temperature `alpha`.
    pub fn channel_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4, alpha: &[f64]) -> Tensor4 {
        let d = q.dims();
        let heads = alpha.len();
        let hd = d.c / heads;
        let t = d.h * d.w;
        let mut out = Tensor4::zeros(d);
        for b in 0..d.n {
            let unit = |src: &Tensor4, ch: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..t).map(|i| src.at(b, ch, i / d.w, i % d.w)).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                raw.into_iter().map(|x| x / n).collect()
            };
            for h in 0..heads {
                for i in 0..hd {
                    let qi = unit(q, h * hd + i);
                    let logits: Vec<f64> = (0..hd)
                        .map(|j| {
                            let kj = unit(k, h * hd + j);
                            qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / alpha[h]
                        })
                        .collect();
                    let a = softmax(&logits);
                    for p in 0..t {
                        let acc: f64 = (0..hd).map(|j| a[j] * v.at(b, h * hd + j, p / d.w, p % d.w)).sum();
                        out.data_mut()[d.index(b, h * hd + i, p / d.w, p % d.w)] = acc;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionDeviation {
    pub pairs: usize,
    pub max_f64: f64,
    pub max_f32: f64,
}

/// Rep-form versus fused FFN on random parameters and inputs.
pub fn measure_fusion(seed: u64, pairs: usize) -> Result<FusionDeviation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_f64, mut max_f32) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let c = rng.random_range(1..=8);
        let e = [1.0, 2.0, 8.0 / 3.0][rng.random_range(0..3)];
        let p = RepLeffnParams::random(c, hidden_width(c, e), &mut rng);
        let d = Dims::new(rng.random_range(1..=2), c, rng.random_range(1..=12), rng.random_range(1..=12));
        let x = Tensor4::<f64>::uniform(d, -1.0, 1.0, &mut rng);
        let fused = fuse_rep_leffn(&p)?;
        max_f64 = max_f64.max(rep_leffn_forward(&x, &p)?.max_abs_diff(&leffn_forward(&x, &fused)?)?);
        let x32 = x.cast::<f32>();
        let a = rep_leffn_forward(&x32, &p)?.cast::<f64>();
        let b = leffn_forward(&x32, &fused)?.cast::<f64>();
        max_f32 = max_f32.max(a.max_abs_diff(&b)?);
    }
    Ok(FusionDeviation { pairs, max_f64, max_f32 })
}

/// Whole-network fusion deviation on one random image (f64).
pub fn measure_model_fusion(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> Result<f64> {
    let model = Model::build(cfg)?;
    let fused = model.fused()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::<f64>::uniform(Dims::new(1, cfg.image_channels, h, w), 0.0, 1.0, &mut rng);
    model.forward(&x)?.max_abs_diff(&fused.forward(&x)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleDeviation {
    pub ggsa_dense: f64,
    pub fcsa_whole_map: f64,
}

/// GGSA with `g = H = W` against dense attention, and single-window FCSA
/// (top weight 1, bottom 0, token map 1) against whole-map channel attention.
pub fn measure_degeneration(seed: u64) -> Result<OracleDeviation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, heads, g) = (8, 2, 6);
    let mut gp = GgsaParams::random(c, heads, g, &mut rng)?;
    gp.bias_table = Tensor4::uniform(gp.bias_table.dims(), -1.0, 1.0, &mut rng);
    let x = Tensor4::<f64>::uniform(Dims::new(2, c, g, g), -1.0, 1.0, &mut rng);
    let got = ggsa_forward(&x, &gp, crate::partition::GridLayout::new(g))?;
    let qkv = oracle::pointwise(&x, &gp.qkv_pw_weight, &gp.qkv_pw_bias);
    let slice = |k: usize| Tensor4::from_fn(x.dims(), |n, ch, y, xx| qkv.at(n, k * c + ch, y, xx));
    let attn = oracle::dense_spatial_attention(&slice(0), &slice(1), &slice(2), heads, &gp.bias_table);
    let want = oracle::pointwise(&attn, &gp.out_pw_weight, &gp.out_pw_bias);
    let ggsa_dense = got.max_abs_diff(&want)?;

    let p = 8;
    let mut fp = FcsaParams::random(c, heads, p, AlphaMode::PerHead, &mut rng)?;
    fp.w_top = Tensor4::ones(fp.w_top.dims());
    fp.w_bottom = Tensor4::zeros(fp.w_bottom.dims());
    fp.w_t = Tensor4::ones(fp.w_t.dims());
    fp.log_alpha = Tensor4::uniform(fp.log_alpha.dims(), -0.5, 0.5, &mut rng);
    let x = Tensor4::<f64>::uniform(Dims::new(2, c, p, p), -1.0, 1.0, &mut rng);
    let got = fcsa_forward(&x, &fp, WindowLayout::shifted(p))?;
    let [q, k, v] = fcsa_qkv(&x, &fp)?;
    let alpha: Vec<f64> = fp.log_alpha.data().iter().map(|a| a.exp()).collect();
    let attn = oracle::channel_attention(&q, &k, &v, &alpha);
    let want = oracle::pointwise(&attn, &fp.out_pw_weight, &fp.out_pw_bias);
    Ok(OracleDeviation {
        ggsa_dense,
        fcsa_whole_map: got.max_abs_diff(&want)?,
    })
}

/// One `(h, w, window, grid, shift)` point of the partition lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticePoint {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub grid: usize,
    pub shift: isize,
}

/// 50 distinct deterministic lattice points; window and grid divide both
/// sides.
pub fn partition_lattice() -> Vec<LatticePoint> {
    const SIDES: [usize; 10] = [4, 6, 8, 12, 16, 18, 24, 30, 32, 48];
    const WINDOWS: [usize; 5] = [2, 3, 4, 8, 16];
    const GRIDS: [usize; 5] = [1, 2, 3, 4, 8];
    let mut out: Vec<LatticePoint> = Vec::new();
    for i in 0.. {
        let h = SIDES[i % 10];
        let w = SIDES[(i * 7 + i / 10) % 10];
        let window = effective_size(WINDOWS[(i / 3) % 5], h, w);
        let grid = effective_size(GRIDS[(i * 3 + 1) % 5], h, w);
        let shift = [0, window / 2, 1, window + 1, h + 3][(i / 2) % 5] as isize;
        let shift = if i % 7 == 0 { -shift } else { shift };
        let pt = LatticePoint { h, w, window, grid, shift };
        if !out.contains(&pt) {
            out.push(pt);
        }
        if out.len() == 50 {
            break;
        }
    }
    out
}

/// Lattice points whose round trips are not bit-exact, or whose
/// partitions are not permutations of the input.
pub fn measure_partitions(points: &[LatticePoint]) -> Result<Vec<LatticePoint>> {
    let mut failed = Vec::new();
    for &pt in points {
        let d = Dims::new(2, 3, pt.h, pt.w);
        let x: Tensor4 = Tensor4::arange(d);
        let sorted = |t: &Tensor4| {
            let mut v = t.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let win = window_partition(&x, pt.window)?;
        let shifted = cyclic_shift(&x, pt.shift);
        let grid = grid_partition(&x, pt.grid)?;
        let ok = window_reverse(&win, pt.window, d)? == x
            && sorted(&win) == x.data()
            && cyclic_shift(&shifted, -pt.shift) == x
            && sorted(&shifted) == x.data()
            && grid_reverse(&grid, pt.grid, d)? == x
            && sorted(&grid) == x.data()
            && cyclic_shift(
                &window_reverse(&window_partition(&shifted, pt.window)?, pt.window, d)?,
                -pt.shift,
            ) == x;
        if !ok {
            failed.push(pt);
        }
    }
    Ok(failed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacScaling {
    pub side: usize,
    pub fcsa: u64,
    pub ggsa: u64,
    pub dense: u64,
}

/// Attention-core MACs at square sides, fixed channels, window and grid.
pub fn measure_mac_scaling(c: usize, heads: usize, window: usize, grid: usize, sides: &[usize]) -> Vec<MacScaling> {
    sides
        .iter()
        .map(|&s| MacScaling {
            side: s,
            fcsa: analysis::fcsa_attention_macs(c, heads, s, s, window),
            ggsa: analysis::ggsa_attention_macs(c, heads, s, s, grid),
            dense: analysis::dense_attention_macs(c, s, s),
        })
        .collect()
}

/// Forward passes on random sizes in `[1, max_side]²`; returns the sizes
/// whose output shape differs from the input.
pub fn measure_shape_closure(cfg: &ModelConfig, seed: u64, count: usize, max_side: usize) -> Result<Vec<(usize, usize)>> {
    let model = Model::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..count {
        let (h, w) = (rng.random_range(1..=max_side), rng.random_range(1..=max_side));
        let x = Tensor4::<f64>::uniform(Dims::new(1, cfg.image_channels, h, w), 0.0, 1.0, &mut rng);
        let y = model.forward(&x)?;
        if y.dims() != x.dims() || !y.all_finite() {
            bad.push((h, w));
        }
    }
    Ok(bad)
}

fn ratio_line(rows: &[MacScaling]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for pair in rows.windows(2) {
        let r = |a: u64, b: u64| b as f64 / a as f64;
        let (f, g, d) = (
            r(pair[0].fcsa, pair[1].fcsa),
            r(pair[0].ggsa, pair[1].ggsa),
            r(pair[0].dense, pair[1].dense),
        );
        ok &= f == 4.0 && g == 4.0 && d == 16.0;
        parts.push(format!("{}→{}: fcsa ×{f:.3} ggsa ×{g:.3} dense ×{d:.3}", pair[0].side, pair[1].side));
    }
    (ok, parts.join("; "))
}

/// Runs every check with the thresholds in this module.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();

    let f = measure_fusion(seed, 100)?;
    out.push(Check::new(
        "ffn fusion",
        f.max_f64 < FUSION_TOL_F64 && f.max_f32 < FUSION_TOL_F32,
        format!("{} pairs, max |Δ| f64 {:.2e}, f32 {:.2e}", f.pairs, f.max_f64, f.max_f32),
    ));
    let m = measure_model_fusion(&ModelConfig::toy(), 20, 13, seed)?;
    out.push(Check::new("model fusion", m < FUSION_TOL_F64, format!("max |Δ| {m:.2e}")));

    let mut worst: Option<gradcheck::GradReport> = None;
    let mut failed = Vec::new();
    let cases = gradcheck::cases();
    for case in &cases {
        let r = case.run(seed)?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
        if worst.as_ref().is_none_or(|w| r.max_rel_err / r.tolerance > w.max_rel_err / w.tolerance) {
            worst = Some(r);
        }
    }
    let w = worst.expect("non-empty case list");
    out.push(Check::new(
        "gradients",
        failed.is_empty(),
        format!(
            "{} cases, worst {} rel {:.2e} (tol {:.0e}){}",
            cases.len(),
            w.name,
            w.max_rel_err,
            w.tolerance,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    ));

    let o = measure_degeneration(seed)?;
    out.push(Check::new(
        "attention oracles",
        o.ggsa_dense < ORACLE_TOL && o.fcsa_whole_map < ORACLE_TOL,
        format!("ggsa vs dense {:.2e}, fcsa vs whole-map {:.2e}", o.ggsa_dense, o.fcsa_whole_map),
    ));

    let lattice = partition_lattice();
    let bad = measure_partitions(&lattice)?;
    out.push(Check::new(
        "partition round trips",
        bad.is_empty(),
        format!("{}/{} lattice points exact", lattice.len() - bad.len(), lattice.len()),
    ));

    let (ok, detail) = ratio_line(&measure_mac_scaling(32, 1, 16, 8, &[64, 128, 256]));
    out.push(Check::new("mac scaling", ok, detail));

    let report = analysis::calibrate(&published_targets(), &SearchSpace::default());
    let best = report.best();
    out.push(Check::new(
        "parameter calibration",
        best.max_abs_deviation <= CALIBRATION_TOL,
        format!("best {} max |dev| {:.2}%", best.candidate.label(), 100.0 * best.max_abs_deviation),
    ));

    let bad = measure_shape_closure(&ModelConfig::toy(), seed, 50, 128)?;
    out.push(Check::new(
        "shape closure",
        bad.is_empty(),
        format!("{}/50 sizes preserved{}", 50 - bad.len(), if bad.is_empty() { String::new() } else { format!(", bad {bad:?}") }),
    ));
    Ok(out)
}
