//! Desk-scale denoising training with a progressive patch schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{add_noise, synth_dataset, Pair};
use super::image::psnr_slices;
use super::optim::{cosine_lr, AdamW};
use crate::autodiff::Tape;
use crate::error::{config_err, shape_err, Result};
use crate::network::{forward_graph, Model, ModelConfig};
use crate::tensor::{DType, Dims, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    Mse,
}

/// Patch size and batch size from iteration `start` on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub patch: usize,
    pub batch: usize,
    pub start: usize,
}

/// Base learning rate of [`TrainConfig::toy`].
pub const TOY_LR: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub lr0: f64,
    pub lr1: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Noise standard deviation on the 0–255 scale.
    pub sigma: f64,
    pub schedule: Vec<Stage>,
    pub loss: LossKind,
    pub train_images: usize,
    pub train_size: usize,
    pub val_images: usize,
    pub val_size: usize,
    pub val_every: usize,
    /// Random flips and 90° rotations of training patches.
    pub augment: bool,
    pub clip_grad_norm: Option<f64>,
    /// Precision of forward/backward; master weights stay f64.
    pub compute: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            lr0: 3e-4,
            lr1: 1e-6,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            sigma: 25.0,
            schedule: vec![
                Stage { patch: 32, batch: 4, start: 0 },
                Stage { patch: 48, batch: 2, start: 600 },
            ],
            loss: LossKind::L1,
            train_images: 32,
            train_size: 96,
            val_images: 8,
            val_size: 64,
            val_every: 250,
            augment: false,
            clip_grad_norm: None,
            compute: DType::F64,
        }
    }
}

impl TrainConfig {
    /// Defaults for the toy denoiser: a larger base learning rate, since
    /// 2000 steps at 3e-4 leave the small model well short of converging.
    pub fn toy() -> Self {
        Self {
            lr0: TOY_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let first = self.schedule.first().ok_or_else(|| config_err!("schedule: empty"))?;
        if first.start != 0 {
            return Err(config_err!("schedule: first stage must start at 0"));
        }
        let m = model.size_multiple();
        for (i, s) in self.schedule.iter().enumerate() {
            if i > 0 && s.start <= self.schedule[i - 1].start {
                return Err(config_err!("schedule: starts must strictly increase"));
            }
            if s.batch == 0 {
                return Err(config_err!("schedule: batch must be ≥ 1"));
            }
            if s.patch == 0 || s.patch > self.train_size || s.patch % m != 0 {
                return Err(config_err!(
                    "schedule: patch {} must be a multiple of {m} no larger than {}",
                    s.patch,
                    self.train_size
                ));
            }
        }
        if self.train_images == 0 || self.val_images == 0 || self.val_every == 0 {
            return Err(config_err!("train_images, val_images and val_every must be ≥ 1"));
        }
        if !(self.sigma >= 0.0 && self.lr0 > 0.0 && self.lr1 >= 0.0) {
            return Err(config_err!("sigma and learning rates must be non-negative"));
        }
        Ok(())
    }

    pub fn stage_at(&self, iter: usize) -> Stage {
        *self
            .schedule
            .iter()
            .rev()
            .find(|s| s.start <= iter)
            .expect("validated: first stage starts at 0")
    }
}

/// Model and training settings of one toy run, as read from a JSON file.
/// Missing fields, at any depth, take the values of [`ToyRun::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ToyRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ToyRun {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, serde_json::from_str(text)?);
        let run: Self = serde_json::from_value(value)?;
        run.model.validate()?;
        run.train.validate(&run.model)?;
        Ok(run)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogEntry>,
    /// Mean PSNR of the noisy validation inputs.
    pub noisy_psnr: f64,
    /// Mean PSNR of the trained model on the validation set.
    pub final_psnr: f64,
}

impl TrainOutcome {
    /// Mean training loss over iterations `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let xs: Vec<f64> = self
            .log
            .iter()
            .filter(|e| (from..to).contains(&e.iteration))
            .map(|e| e.loss)
            .collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }
}

/// Mean absolute (or squared) error.
pub fn loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>, kind: LossKind) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("loss of {} against {}", pred.dims(), target.dims()));
    }
    let n = pred.len().max(1) as f64;
    let it = pred.data().iter().zip(target.data()).map(|(a, b)| a.as_f64() - b.as_f64());
    Ok(match kind {
        LossKind::L1 => it.map(f64::abs).sum::<f64>() / n,
        LossKind::Mse => it.map(|d| d * d).sum::<f64>() / n,
    })
}

fn crop_patch(img: &Tensor4, y0: usize, x0: usize, p: usize) -> Tensor4 {
    Tensor4::from_fn(Dims::new(1, img.dims().c, p, p), |_, c, y, x| img.at(0, c, y0 + y, x0 + x))
}

/// Random flip/rotation of a square patch.
fn augment<R: Rng + ?Sized>(t: &Tensor4, rng: &mut R) -> Tensor4 {
    let k = rng.random_range(0..8u8);
    let p = t.dims().h;
    Tensor4::from_fn(t.dims(), |n, c, y, x| {
        let (mut sy, mut sx) = (y, x);
        if k & 1 == 1 {
            sx = p - 1 - sx;
        }
        if k & 2 == 2 {
            sy = p - 1 - sy;
        }
        if k & 4 == 4 {
            std::mem::swap(&mut sy, &mut sx);
        }
        t.at(n, c, sy, sx)
    })
}

fn stack(parts: &[Tensor4]) -> Tensor4 {
    let d = parts[0].dims();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor4::from_vec(Dims::new(parts.len(), d.c, d.h, d.w), data).expect("same-shape parts")
}

/// Loss and per-parameter gradients (store order) for one batch.
fn loss_and_grads<T: Scalar>(
    model: &Model,
    noisy: &Tensor4,
    clean: &Tensor4,
    kind: LossKind,
) -> Result<(f64, Vec<(String, Tensor4)>)> {
    let mut tape: Tape<T> = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let x = tape.constant(noisy.cast());
    let y = forward_graph(&mut tape, &bound, &model.config, x)?;
    let target = clean.cast::<T>();
    let l = match kind {
        LossKind::L1 => tape.l1_loss(y, &target)?,
        LossKind::Mse => tape.mse_loss(y, &target)?,
    };
    let value = tape.value(l).data()[0].as_f64();
    let mut grads = tape.backward(l, Tensor4::scalar(T::one()))?;
    let mut out = Vec::with_capacity(model.params.len());
    for name in model.params.names() {
        let g = grads
            .take(bound.get(name)?)
            .expect("every bound parameter receives a gradient");
        out.push((name.to_string(), g.cast()));
    }
    Ok((value, out))
}

/// Mean PSNR of the (clamped) model output over `pairs`.
pub fn evaluate(model: &Model, pairs: &[Pair], compute: DType) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out: Tensor4 = match compute {
            DType::F64 => model.forward(&p.noisy)?,
            DType::F32 => model.forward(&p.noisy.cast::<f32>())?.cast(),
        };
        let out = out.map(|v| v.clamp(0.0, 1.0));
        total += psnr_slices(out.data(), p.clean.data()).min(super::image::PSNR_CAP);
    }
    Ok(total / pairs.len().max(1) as f64)
}

pub fn noisy_psnr(pairs: &[Pair]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| psnr_slices(p.noisy.data(), p.clean.data()).min(super::image::PSNR_CAP))
        .sum();
    total / pairs.len().max(1) as f64
}

/// Validation pairs used by [`train_toy`].
pub fn validation_set(tc: &TrainConfig, channels: usize) -> Vec<Pair> {
    synth_dataset(tc.seed ^ 0x5eed_0f_7a11, tc.val_images, tc.val_size, channels, tc.sigma)
}

pub fn train_toy(mc: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_toy_with(mc, tc, |_| {})
}

/// Trains from a freshly built model, calling `on_log` for every entry.
pub fn train_toy_with(
    mc: &ModelConfig,
    tc: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    tc.validate(mc)?;
    let mut model = Model::build(mc)?;
    let ch = mc.image_channels;
    let train = synth_dataset(tc.seed, tc.train_images, tc.train_size, ch, 0.0);
    let val = validation_set(tc, ch);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut opt = AdamW::new(tc.betas, tc.weight_decay);
    let mut log = Vec::with_capacity(tc.iterations);

    for it in 0..tc.iterations {
        let stage = tc.stage_at(it);
        let mut clean = Vec::with_capacity(stage.batch);
        let mut noisy = Vec::with_capacity(stage.batch);
        for _ in 0..stage.batch {
            let img = &train[rng.random_range(0..train.len())].clean;
            let y0 = rng.random_range(0..=tc.train_size - stage.patch);
            let x0 = rng.random_range(0..=tc.train_size - stage.patch);
            let mut patch = crop_patch(img, y0, x0, stage.patch);
            if tc.augment {
                patch = augment(&patch, &mut rng);
            }
            noisy.push(add_noise(&patch, tc.sigma, &mut rng));
            clean.push(patch);
        }
        let (noisy, clean) = (stack(&noisy), stack(&clean));
        let (value, mut grads) = match tc.compute {
            DType::F64 => loss_and_grads::<f64>(&model, &noisy, &clean, tc.loss)?,
            DType::F32 => loss_and_grads::<f32>(&model, &noisy, &clean, tc.loss)?,
        };
        if let Some(max) = tc.clip_grad_norm {
            let norm = grads
                .iter()
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = max / norm;
                for (_, g) in &mut grads {
                    *g = g.map(|v| v * s);
                }
            }
        }
        let lr = cosine_lr(it, tc.iterations, tc.lr0, tc.lr1);
        opt.step(&mut model.params, &grads, lr)?;

        let last = it + 1 == tc.iterations;
        let val_psnr = if (it + 1) % tc.val_every == 0 || last {
            Some(evaluate(&model, &val, tc.compute)?)
        } else {
            None
        };
        let entry = LogEntry {
            iteration: it,
            lr,
            loss: value,
            val_psnr,
        };
        on_log(&entry);
        log.push(entry);
    }
    let final_psnr = match log.last().and_then(|e| e.val_psnr) {
        Some(p) => p,
        None => evaluate(&model, &val, tc.compute)?,
    };
    Ok(TrainOutcome {
        model,
        log,
        noisy_psnr: noisy_psnr(&val),
        final_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            schedule: vec![Stage { patch: 16, batch: 1, start: 0 }, Stage { patch: 24, batch: 1, start: 2 }],
            train_images: 2,
            train_size: 32,
            val_images: 1,
            val_size: 16,
            val_every: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            window: 4,
            grid: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn toy_run_json_defaults_and_round_trip() {
        let run = ToyRun::from_json(r#"{"train": {"iterations": 7}}"#).unwrap();
        assert_eq!(run.model, ModelConfig::toy());
        assert_eq!(run.train.iterations, 7);
        assert_eq!(run.train.lr0, TOY_LR);
        assert_eq!(run.train.betas, (0.9, 0.999));
        let run = ToyRun::from_json(r#"{"model": {"base_channels": 16}}"#).unwrap();
        assert_eq!((run.model.base_channels, run.model.window), (16, 8));
        assert_eq!(ToyRun::from_json(&run.to_json()).unwrap(), run);
        let bad = r#"{"train": {"schedule": [{"patch": 20, "batch": 1, "start": 0}]}}"#;
        assert!(matches!(ToyRun::from_json(bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn losses() {
        let a = Tensor4::<f64>::full(Dims::new(1, 1, 2, 2), 0.25);
        assert_eq!(loss(&a, &a, LossKind::L1).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert_eq!(loss(&a, &b, LossKind::L1).unwrap(), 0.5);
        assert_eq!(loss(&a, &b, LossKind::Mse).unwrap(), 0.25);
        assert!(loss(&a, &Tensor4::zeros(Dims::new(1, 1, 1, 2)), LossKind::L1).is_err());
    }

    #[test]
    fn schedule_validation() {
        let m = tiny_model();
        quick().validate(&m).unwrap();
        let mut t = quick();
        t.schedule[1].start = 0;
        assert!(t.validate(&m).is_err());
        let mut t = quick();
        t.schedule[0].patch = 12;
        assert!(t.validate(&m).is_err());
        let mut t = quick();
        t.schedule[0].start = 1;
        assert!(t.validate(&m).is_err());
        assert_eq!(quick().stage_at(2).patch, 24);
    }

    #[test]
    fn zero_iterations_leave_model_at_init() {
        let t = TrainConfig { iterations: 0, ..quick() };
        let out = train_toy(&tiny_model(), &t).unwrap();
        assert_eq!(out.model, Model::build(&tiny_model()).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn short_runs_are_reproducible() {
        let a = train_toy(&tiny_model(), &quick()).unwrap();
        let b = train_toy(&tiny_model(), &quick()).unwrap();
        assert_eq!(a.model.params.to_bytes(), b.model.params.to_bytes());
        assert_eq!(a.log.len(), 3);
        assert!(a.log[1].val_psnr.is_some() && a.log[2].val_psnr.is_some() && a.log[0].val_psnr.is_none());
        assert_ne!(a.model, Model::build(&tiny_model()).unwrap());
    }

    #[test]
    fn augmentation_and_f32_compute_run() {
        let t = TrainConfig { augment: true, compute: DType::F32, clip_grad_norm: Some(0.1), ..quick() };
        let out = train_toy(&tiny_model(), &t).unwrap();
        assert!(out.log.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn augment_permutes_pixels() {
        let t = Tensor4::arange(Dims::new(1, 1, 3, 3));
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let a = augment(&t, &mut r);
            let mut v = a.data().to_vec();
            v.sort_by(f64::total_cmp);
            assert_eq!(v, t.data());
        }
    }
}
