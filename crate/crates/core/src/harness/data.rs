//! Procedural clean images and additive Gaussian noise.
//!
//! Each clean image is a per-channel linear ramp, plus 3–6 solid
//! axis-aligned rectangles, plus 1–2 oriented sinusoids, clamped to [0, 1].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Dims, Tensor4};

/// `1×channels×h×w` clean image.
pub fn synth_image<R: Rng + ?Sized>(rng: &mut R, channels: usize, h: usize, w: usize) -> Tensor4 {
    let mut img = Tensor4::zeros(Dims::new(1, channels, h, w));
    let (hf, wf) = (h.max(1) as f64, w.max(1) as f64);
    let ramps: Vec<[f64; 3]> = (0..channels)
        .map(|_| [rng.random_range(0.2..0.8), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)])
        .collect();
    let rects: Vec<([usize; 4], Vec<f64>)> = (0..rng.random_range(3..=6))
        .map(|_| {
            let y0 = rng.random_range(0..h.max(1));
            let x0 = rng.random_range(0..w.max(1));
            let y1 = (y0 + rng.random_range(h / 8 + 1..=h / 2 + 1)).min(h);
            let x1 = (x0 + rng.random_range(w / 8 + 1..=w / 2 + 1)).min(w);
            let colour = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
            ([y0, x0, y1, x1], colour)
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=2))
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.05..0.5);
            let amp = rng.random_range(0.03..0.15);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (angle, freq, amp, phase)
        })
        .collect();
    let d = img.dims();
    let data = img.data_mut();
    for c in 0..channels {
        let [b, gy, gx] = ramps[c];
        for y in 0..h {
            for x in 0..w {
                let mut v = b + gy * (y as f64 / hf - 0.5) + gx * (x as f64 / wf - 0.5);
                for ([y0, x0, y1, x1], colour) in &rects {
                    if (*y0..*y1).contains(&y) && (*x0..*x1).contains(&x) {
                        v = colour[c];
                    }
                }
                for &(angle, freq, amp, phase) in &waves {
                    let t = (x as f64) * angle.cos() + (y as f64) * angle.sin();
                    v += amp * (freq * t + phase).sin();
                }
                data[d.index(0, c, y, x)] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `clean + N(0, σ/255)`, clipped to [0, 1]. `sigma` is on the 0–255 scale.
pub fn add_noise<R: Rng + ?Sized>(clean: &Tensor4, sigma: f64, rng: &mut R) -> Tensor4 {
    if sigma == 0.0 {
        return clean.clone();
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite positive std");
    let mut out = clean.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: Tensor4,
    pub noisy: Tensor4,
}

/// `count` seeded (clean, noisy) pairs of `size×size` images.
pub fn synth_dataset(seed: u64, count: usize, size: usize, channels: usize, sigma: f64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let clean = synth_image(&mut rng, channels, size, size);
            let noisy = add_noise(&clean, sigma, &mut rng);
            Pair { clean, noisy }
        })
        .collect()
}
