//! Central finite-difference checks of tape gradients (f64 only).
//!
//! For an output `y = f(x₁…xₖ)` and a fixed random `R` shaped like `y`,
//! the scalar `L = ⟨y, R⟩` is differentiated both by the tape (seeded with
//! `R`) and numerically, `(L(x + h) − L(x − h)) / 2h`. The error of one
//! entry is `|a − n| / max(|a|, |n|, 1e-4)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AlphaMode};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ffn;
use crate::network::{self, BlockGeometry, Model, ModelConfig};
use crate::ops::Axis;
use crate::params::{Bound, ParamStore};
use crate::partition::{GridLayout, WindowLayout};
use crate::tensor::{Dims, Tensor4};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    fn merge(&mut self, other: GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn inner(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares tape and numeric gradients of `f` at `inputs`. With
/// `per_input = Some(k)`, only `k` random entries of each input are probed.
pub fn check_fn<F>(
    name: &str,
    inputs: &[Tensor4],
    f: F,
    rng: &mut ChaCha8Rng,
    per_input: Option<usize>,
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let r = Tensor4::uniform(tape.dims(out), -1.0, 1.0, rng);
    let mut grads = tape.backward(out, r.clone())?;

    let eval = |xs: &[Tensor4]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs)?;
        Ok(inner(t.value(y), &r))
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads
            .take(v)
            .ok_or_else(|| Error::Usage(format!("{name}: no gradient for input {i}")))?;
        let n = inputs[i].len();
        let entries: Vec<usize> = match per_input {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
        tolerance,
    })
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradReport>;

/// A named gradient check.
pub struct Case {
    pub name: &'static str,
    /// Random trials for the default run.
    pub trials: usize,
    run: CaseFn,
}

impl Case {
    pub fn run(&self, seed: u64) -> Result<GradReport> {
        self.run_trials(seed, self.trials)
    }

    pub fn run_trials(&self, seed: u64, trials: usize) -> Result<GradReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = (self.run)(&mut rng)?;
        for _ in 1..trials {
            report.merge((self.run)(&mut rng)?);
        }
        report.name = self.name.to_string();
        Ok(report)
    }
}

fn u(d: Dims, r: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::uniform(d, -1.0, 1.0, r)
}

fn dims(n: usize, c: usize, h: usize, w: usize) -> Dims {
    Dims::new(n, c, h, w)
}

macro_rules! prim {
    ($name:expr, [$($d:expr),*], |$t:ident, $v:ident| $body:expr) => {
        |r: &mut ChaCha8Rng| {
            let inputs = vec![$(u($d, r)),*];
            check_fn($name, &inputs, |$t: &mut Tape<f64>, $v: &[Var]| $body, r, None, PRIMITIVE_TOL)
        }
    };
}

fn l1_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let pred = u(dims(1, 2, 3, 3), r);
    // keep every residual at least 0.1 away from the kink
    let target = pred.map(|p| p + 0.1 + 0.2 * ((p * 1e3).sin().abs()) * (p * 7.0).cos().signum());
    check_fn("l1_loss", &[pred], |t, v| t.l1_loss(v[0], &target), r, None, PRIMITIVE_TOL)
}

fn mse_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let pred = u(dims(1, 2, 3, 3), r);
    let target = u(dims(1, 2, 3, 3), r);
    check_fn("mse_loss", &[pred], |t, v| t.mse_loss(v[0], &target), r, None, PRIMITIVE_TOL)
}

fn store_case(
    name: &str,
    store: ParamStore,
    x: Tensor4,
    r: &mut ChaCha8Rng,
    per_input: Option<usize>,
    tol: f64,
    body: impl Fn(&mut Tape<f64>, Var, &Bound) -> Result<Var>,
) -> Result<GradReport> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    check_fn(
        name,
        &inputs,
        |t, v| {
            let bound: Bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            body(t, v[0], &bound)
        },
        r,
        per_input,
        tol,
    )
}

/// Non-neutral values for parameters that start at constants.
fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        let spread = if ["w_t", "w_top", "w_bottom", "scale"].iter().any(|s| name.ends_with(s)) {
            0.3
        } else if ["log_alpha", "bias_table", "shift"].iter().any(|s| name.ends_with(s)) {
            0.5
        } else {
            continue;
        };
        for v in t.data_mut() {
            *v += r.random_range(-spread..spread);
        }
    }
}

fn fcsa_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::default();
    attention::init_fcsa(&mut s, "a", 4, 2, 4, AlphaMode::PerHead, r)?;
    jitter(&mut s, r);
    let x = u(dims(1, 4, 8, 8), r);
    store_case("fcsa", s, x, r, None, PRIMITIVE_TOL, |t, x, b| {
        attention::fcsa(t, x, &b.scope("a"), 2, WindowLayout::shifted(4))
    })
}

fn ggsa_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::default();
    attention::init_ggsa(&mut s, "a", 4, 2, 2, r)?;
    jitter(&mut s, r);
    let x = u(dims(1, 4, 4, 6), r);
    store_case("ggsa", s, x, r, None, PRIMITIVE_TOL, |t, x, b| {
        attention::ggsa(t, x, &b.scope("a"), 2, GridLayout::new(2))
    })
}

fn rep_leffn_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::default();
    ffn::init_rep_leffn(&mut s, "f", 3, 6, r)?;
    let x = u(dims(1, 3, 5, 5), r);
    store_case("rep_leffn", s, x, r, None, PRIMITIVE_TOL, |t, x, b| ffn::ffn(t, x, &b.scope("f")))
}

fn leffn_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::default();
    ffn::LeffnParams::random(3, 6, 5, r).to_store(&mut s, "f.leffn")?;
    let x = u(dims(1, 3, 5, 5), r);
    store_case("leffn", s, x, r, None, PRIMITIVE_TOL, |t, x, b| ffn::ffn(t, x, &b.scope("f")))
}

fn fgtb_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::default();
    let geom = BlockGeometry { heads: 2, window: 4, grid: 2 };
    network::init_fgtb(&mut s, "b", 4, 8, geom, AlphaMode::PerHead, r)?;
    jitter(&mut s, r);
    let x = u(dims(1, 4, 8, 8), r);
    store_case("fgtb", s, x, r, Some(6), PRIMITIVE_TOL, move |t, x, b| {
        network::fgtb(t, x, &b.scope("b"), geom)
    })
}

/// Toy network (C=4, one FGTB per stage), a few entries per parameter.
pub fn network_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        block_counts: [1, 1, 1, 1],
        refinement_blocks: 0,
        window: 4,
        grid: 2,
        ..ModelConfig::toy()
    }
}

fn network_case(r: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = network_config();
    let mut model = Model::build(&cfg)?;
    jitter(&mut model.params, r);
    let x = Tensor4::uniform(dims(1, 3, 12, 10), 0.0, 1.0, r);
    store_case("network", model.params, x, r, Some(2), NETWORK_TOL, move |t, x, b| {
        network::forward_graph(t, b, &cfg, x)
    })
}

/// Every registered check, primitives first.
pub fn cases() -> Vec<Case> {
    let c = |name, trials, run: CaseFn| Case { name, trials, run };
    vec![
        c("conv_pointwise", 20, prim!("conv_pointwise", [dims(2, 3, 3, 4), dims(4, 3, 1, 1), dims(1, 4, 1, 1)], |t, v| t.conv_pointwise(v[0], v[1], Some(v[2])))),
        c("conv_depthwise", 20, prim!("conv_depthwise", [dims(1, 3, 5, 5), dims(3, 1, 3, 3), dims(1, 3, 1, 1)], |t, v| t.conv_depthwise(v[0], v[1], Some(v[2])))),
        c("conv2d", 20, prim!("conv2d", [dims(1, 2, 4, 5), dims(3, 2, 3, 3), dims(1, 3, 1, 1)], |t, v| t.conv2d(v[0], v[1], Some(v[2])))),
        c("gelu", 20, prim!("gelu", [dims(1, 2, 3, 3)], |t, v| { let s = t.scale(v[0], 3.0)?; t.gelu(s) })),
        c("layer_norm", 20, prim!("layer_norm", [dims(2, 4, 3, 3), dims(1, 4, 1, 1), dims(1, 4, 1, 1)], |t, v| t.layer_norm_channels(v[0], v[1], v[2], 1e-6))),
        c("softmax", 20, prim!("softmax", [dims(1, 2, 3, 5)], |t, v| t.softmax_lastdim(v[0]))),
        c("l2_normalize", 20, prim!("l2_normalize", [dims(1, 3, 2, 4)], |t, v| { let a = t.l2_normalize(v[0], Axis::W)?; t.l2_normalize(a, Axis::C) })),
        c("exp", 20, prim!("exp", [dims(1, 2, 2, 3)], |t, v| t.exp(v[0]))),
        c("scale", 20, prim!("scale", [dims(1, 2, 2, 3)], |t, v| t.scale(v[0], -1.7))),
        c("add", 20, prim!("add", [dims(2, 3, 4, 4), dims(1, 3, 1, 1)], |t, v| t.add(v[0], v[1]))),
        c("mul", 20, prim!("mul", [dims(2, 3, 4, 4), dims(1, 3, 1, 4)], |t, v| t.mul(v[0], v[1]))),
        c("matmul", 20, prim!("matmul", [dims(1, 2, 3, 4), dims(1, 2, 4, 5)], |t, v| t.matmul(v[0], v[1]))),
        c("transpose", 20, prim!("transpose", [dims(1, 2, 3, 4)], |t, v| t.transpose_last(v[0]))),
        c("pixel_shuffle", 20, prim!("pixel_shuffle", [dims(1, 8, 2, 3)], |t, v| t.pixel_shuffle(v[0], 2))),
        c("pixel_unshuffle", 20, prim!("pixel_unshuffle", [dims(1, 2, 4, 6)], |t, v| t.pixel_unshuffle(v[0], 2))),
        c("concat", 20, prim!("concat", [dims(1, 2, 3, 3), dims(1, 3, 3, 3)], |t, v| t.concat_channels(v[0], v[1]))),
        c("slice_channels", 20, prim!("slice_channels", [dims(2, 5, 2, 2)], |t, v| t.slice_channels(v[0], 1, 3))),
        c("crop", 20, prim!("crop", [dims(1, 2, 5, 6)], |t, v| t.crop(v[0], 3, 4))),
        c("pad_reflect", 20, prim!("pad_reflect", [dims(1, 2, 3, 5)], |t, v| t.pad_reflect(v[0], 8, 7))),
        c("reshape", 20, prim!("reshape", [dims(1, 2, 3, 4)], |t, v| t.reshape(v[0], dims(2, 3, 1, 4)))),
        c("gather_table", 20, prim!("gather_table", [dims(1, 2, 1, 9)], |t, v| t.gather_table(v[0], &attention::relative_position_index(2, 2), 4, 4))),
        c("window_partition", 20, prim!("window_partition", [dims(2, 2, 4, 6)], |t, v| t.window_partition(v[0], 2))),
        c("window_reverse", 20, prim!("window_reverse", [dims(12, 2, 2, 2)], |t, v| t.window_reverse(v[0], 2, dims(2, 2, 4, 6)))),
        c("cyclic_shift", 20, prim!("cyclic_shift", [dims(1, 2, 4, 5)], |t, v| { let a = t.cyclic_shift(v[0], 2)?; t.cyclic_shift(a, -1) })),
        c("grid_partition", 20, prim!("grid_partition", [dims(1, 2, 4, 6)], |t, v| t.grid_partition(v[0], 2))),
        c("grid_reverse", 20, prim!("grid_reverse", [dims(6, 2, 2, 2)], |t, v| t.grid_reverse(v[0], 2, dims(1, 2, 4, 6)))),
        c("l1_loss", 20, l1_case),
        c("mse_loss", 20, mse_case),
        c("fcsa", 3, fcsa_case),
        c("ggsa", 3, ggsa_case),
        c("leffn", 3, leffn_case),
        c("rep_leffn", 3, rep_leffn_case),
        c("fgtb", 1, fgtb_case),
        c("network", 1, network_case),
    ]
}

pub fn case(name: &str) -> Option<Case> {
    cases().into_iter().find(|c| c.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // y = x² built from mul, then scaled on the numeric side only
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = u(dims(1, 1, 2, 2), &mut r);
        let rep = check_fn("square", &[x.clone()], |t, v| t.mul(v[0], v[0]), &mut r, None, 1e-4).unwrap();
        assert!(rep.passed() && rep.checked == 4);
        let bad = check_fn(
            "bad",
            &[x],
            |t, v| if t.requires_grad(v[0]) { t.mul(v[0], v[0]) } else { t.scale(v[0], 0.0) },
            &mut r,
            None,
            1e-4,
        )
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn primitive_cases_pass() {
        for case in cases().iter().filter(|c| c.trials == 20) {
            let rep = case.run_trials(1, 3).unwrap();
            assert!(rep.passed(), "{} rel err {}", rep.name, rep.max_rel_err);
        }
    }

    #[test]
    fn names_are_unique() {
        let all = cases();
        for (i, a) in all.iter().enumerate() {
            assert!(all[i + 1..].iter().all(|b| b.name != a.name));
        }
        assert!(case("fcsa").is_some() && case("nope").is_none());
    }
}
