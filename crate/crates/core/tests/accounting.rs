//! Cost formulas against counting loops and against built models.

use hieratt::analysis::{
    count_params, dense_attention_macs, fcsa_attention_macs, ggsa_attention_macs,
};
use hieratt::network::{BlockMode, HeadSchedule, Model, ModelConfig, SkipMode};
use hieratt::partition::effective_size;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Walks the attention products the way a naive implementation would and
/// counts one MAC per multiply-accumulate.
fn counted_fcsa(c: usize, heads: usize, h: usize, w: usize, window: usize) -> u64 {
    let p = effective_size(window, h, w);
    let d = c / heads;
    let mut macs = 0u64;
    for _branch in 0..2 {
        for _win in 0..(h / p) * (w / p) {
            for _head in 0..heads {
                // logits[i][j] = Σ_t q[i][t]·k[j][t]
                for _i in 0..d {
                    for _j in 0..d {
                        for _t in 0..p * p {
                            macs += 1;
                        }
                    }
                }
                // out[i][t] = Σ_j a[i][j]·v[j][t]
                for _i in 0..d {
                    for _t in 0..p * p {
                        for _j in 0..d {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    macs
}

fn counted_ggsa(c: usize, heads: usize, h: usize, w: usize, grid: usize) -> u64 {
    let g = effective_size(grid, h, w);
    let (d, t) = (c / heads, g * g);
    let mut macs = 0u64;
    for _group in 0..(h / g) * (w / g) {
        for _head in 0..heads {
            for _i in 0..t {
                for _j in 0..t {
                    macs += 2 * d as u64; // q·k and a·v for one token pair
                }
            }
        }
    }
    macs
}

fn counted_dense(c: usize, h: usize, w: usize) -> u64 {
    let mut macs = 0u64;
    for _i in 0..h * w {
        for _j in 0..h * w {
            macs += 2 * c as u64;
        }
    }
    macs
}

#[test]
fn attention_formulas_match_counting_loops() {
    for &(c, heads, h, w, p, g) in &[
        (8, 2, 16, 16, 8, 4),
        (12, 3, 24, 16, 8, 8),
        (4, 1, 6, 10, 4, 4),
        (16, 4, 32, 32, 16, 8),
        (6, 2, 8, 8, 16, 16),
    ] {
        assert_eq!(fcsa_attention_macs(c, heads, h, w, p), counted_fcsa(c, heads, h, w, p));
        assert_eq!(ggsa_attention_macs(c, heads, h, w, g), counted_ggsa(c, heads, h, w, g));
        assert_eq!(dense_attention_macs(c, h, w), counted_dense(c, h, w));
    }
}

#[test]
fn analytic_counts_match_built_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let heads = match rng.random_range(0..3) {
            0 => HeadSchedule::Doubling { base: 1 },
            1 => HeadSchedule::Constant { heads: 2 },
            _ => HeadSchedule::Explicit { heads: [1, 2, 2, 4] },
        };
        let cfg = ModelConfig {
            base_channels: 4 * rng.random_range(1..=3),
            block_counts: [0; 4].map(|_| rng.random_range(1..=3)),
            refinement_blocks: rng.random_range(0..=2),
            window: [4, 8][rng.random_range(0..2)],
            grid: [2, 4][rng.random_range(0..2)],
            expansion: [1.0, 2.0, 8.0 / 3.0][rng.random_range(0..3)],
            heads,
            block_mode: [BlockMode::MirroredFgtb, BlockMode::MirroredLayers, BlockMode::Split][rng.random_range(0..3)],
            skip: [SkipMode::Concat, SkipMode::Add][rng.random_range(0..2)],
            seed: rng.random(),
            ..ModelConfig::toy()
        };
        if cfg.validate().is_err() {
            continue;
        }
        let model = Model::build(&cfg).unwrap();
        assert_eq!(count_params(&cfg, false), model.num_params() as u64, "{cfg:?}");
        assert_eq!(count_params(&cfg, true), model.fused().unwrap().num_params() as u64, "{cfg:?}");
    }
}

#[test]
fn saved_models_reload_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&ModelConfig::toy()).unwrap();
    let path = dir.path().join("toy.iptw");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    let x = hieratt::Tensor4::<f64>::full(hieratt::Dims::new(1, 3, 9, 14), 0.5);
    assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
}
