//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor4;

/// `lr1 + ½(lr0 − lr1)(1 + cos(π·iter/total))`.
pub fn cosine_lr(iter: usize, total: usize, lr0: f64, lr1: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = iter.min(total) as f64 / total as f64;
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Tensor4, Tensor4)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            betas,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor4)], lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dims() != g.dims() {
                return Err(shape_err!("gradient for `{name}` is {}, parameter {}", g.dims(), p.dims()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor4::zeros(g.dims()), Tensor4::zeros(g.dims())));
            let decay = 1.0 - lr * self.weight_decay;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pi *= decay;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("p", Tensor4::from_f64s(Dims::new(1, 1, 1, vals.len()), vals).unwrap()).unwrap();
        s
    }

    fn grad(vals: &[f64]) -> Vec<(String, Tensor4)> {
        vec![("p".into(), Tensor4::from_f64s(Dims::new(1, 1, 1, vals.len()), vals).unwrap())]
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 1e-6), 3e-4);
        assert!((cosine_lr(100, 100, 3e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 3e-4, 1e-6) - (3e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        opt.step(&mut s, &grad(&[0.0, 0.0]), 0.1).unwrap();
        assert_eq!(s, store(&[1.0, -2.0]));
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        let mut s = store(&[0.0, 0.0]);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        opt.step(&mut s, &grad(&[3.0, -0.5]), 0.01).unwrap();
        let p = s.get("p").unwrap().data();
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_exactly() {
        let mut s = store(&[2.0]);
        let mut opt = AdamW::new((0.9, 0.999), 1e-2);
        let mut want = 2.0;
        for _ in 0..10 {
            opt.step(&mut s, &grad(&[0.0]), 0.5).unwrap();
            want *= 1.0 - 0.5 * 1e-2;
        }
        assert_eq!(s.get("p").unwrap().data()[0], want);
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // f(x, y) = 2x² + ½y², written out step by step
        let (lr, b1, b2, eps, wd) = (0.05, 0.9, 0.999, 1e-8, 1e-3);
        let mut x = [1.5f64, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut s = store(&x);
        let mut opt = AdamW::new((b1, b2), wd);
        for t in 1..=100 {
            let g = [4.0 * x[0], x[1]];
            for i in 0..2 {
                x[i] -= lr * wd * x[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
            let cur = s.get("p").unwrap().data().to_vec();
            opt.step(&mut s, &grad(&[4.0 * cur[0], cur[1]]), lr).unwrap();
        }
        let got = s.get("p").unwrap().data();
        assert!((got[0] - x[0]).abs() < 1e-12 && (got[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut s = store(&[1.0]);
        assert!(AdamW::new((0.9, 0.999), 0.0).step(&mut s, &grad(&[1.0, 2.0]), 0.1).is_err());
    }
}
