use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::tensor::{Dims, Scalar, Tensor4};

/// Floor applied to slice norms in [`l2_normalize`]; an all-zero slice
/// maps to zeros instead of NaN.
pub const L2_EPS: f64 = 1e-12;

/// Standard normal CDF through `erfc`, accurate in both tails.
#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| {
        let v = v.as_f64();
        T::from_f64(v * normal_cdf(v))
    })
}

pub fn gelu_backward<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x.dims());
    for ((d, &v), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let v = v.as_f64();
        *d = g * T::from_f64(normal_cdf(v) + v * normal_pdf(v));
    }
    dx
}

pub fn exp<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.exp())
}

/// Softmax along the trailing (W) axis, max-subtracted.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let w = x.dims().w;
    let mut out = x.clone();
    if w == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// VJP of softmax given its output `y`.
pub fn softmax_lastdim_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let w = y.dims().w;
    let mut dx = Tensor4::zeros(y.dims());
    if w == 0 {
        return dx;
    }
    for ((drow, yrow), grow) in dx
        .data_mut()
        .chunks_mut(w)
        .zip(y.data().chunks(w))
        .zip(dy.data().chunks(w))
    {
        let s: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
            *d = yv * (gv - s);
        }
    }
    dx
}

/// Tensor axis selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N = 0,
    C = 1,
    H = 2,
    W = 3,
}

/// Calls `f(base, stride, len)` for every 1-D slice along `axis`.
fn for_each_slice(dims: Dims, axis: Axis, mut f: impl FnMut(usize, usize, usize)) {
    let ext = dims.to_array();
    let strides = dims.strides();
    let a = axis as usize;
    let others: Vec<usize> = (0..4).filter(|&i| i != a).collect();
    for i0 in 0..ext[others[0]] {
        for i1 in 0..ext[others[1]] {
            for i2 in 0..ext[others[2]] {
                let base = i0 * strides[others[0]] + i1 * strides[others[1]] + i2 * strides[others[2]];
                f(base, strides[a], ext[a]);
            }
        }
    }
}

/// Scales every slice along `axis` to unit Euclidean norm. Returns the
/// output together with the (eps-floored) norms, one per slice.
pub fn l2_normalize<T: Scalar>(x: &Tensor4<T>, axis: Axis) -> (Tensor4<T>, Vec<T>) {
    let mut out = x.clone();
    let mut norms = Vec::new();
    let eps = T::from_f64(L2_EPS);
    let xs = x.data();
    let os = out.data_mut();
    for_each_slice(x.dims(), axis, |base, stride, len| {
        let mut ss = T::zero();
        for k in 0..len {
            let v = xs[base + k * stride];
            ss += v * v;
        }
        let norm = ss.sqrt().max(eps);
        let inv = T::one() / norm;
        for k in 0..len {
            os[base + k * stride] = xs[base + k * stride] * inv;
        }
        norms.push(norm);
    });
    (out, norms)
}

pub fn l2_normalize_backward<T: Scalar>(
    y: &Tensor4<T>,
    norms: &[T],
    axis: Axis,
    dy: &Tensor4<T>,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(y.dims());
    let eps = T::from_f64(L2_EPS);
    let ys = y.data();
    let gs = dy.data();
    let ds = dx.data_mut();
    let mut slice = 0;
    for_each_slice(y.dims(), axis, |base, stride, len| {
        let norm = norms[slice];
        slice += 1;
        let inv = T::one() / norm;
        if norm > eps {
            let mut proj = T::zero();
            for k in 0..len {
                proj += ys[base + k * stride] * gs[base + k * stride];
            }
            for k in 0..len {
                let i = base + k * stride;
                ds[i] = (gs[i] - ys[i] * proj) * inv;
            }
        } else {
            for k in 0..len {
                let i = base + k * stride;
                ds[i] = gs[i] * inv;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(Dims::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn gelu_reference_values() {
        let out = gelu(&row(&[0.0, 1.0, -10.0]));
        assert_eq!(out.data()[0], 0.0);
        // 1·Φ(1), Φ(1) = 0.841344746068542948585232545632...
        assert!((out.data()[1] - 0.841_344_746_068_543).abs() < 1e-15);
        let tail = out.data()[2];
        assert!(tail < 0.0 && tail.abs() < 1e-20, "{tail}");
        // -10·Φ(-10) with Φ(-10) = 7.6198530241605e-24
        assert!((tail + 7.619_853_024_160_5e-23).abs() < 1e-33);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_lastdim(&row(&[0.0, 0.0])).data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&row(&[1000.0, 0.0]));
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        let s = softmax_lastdim(&row(&[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::uniform(Dims::new(2, 3, 4, 7), -20.0, 20.0, &mut rng);
        let s = softmax_lastdim(&x);
        for r in s.data().chunks(7) {
            assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let (y, _) = l2_normalize(&row(&[3.0, 4.0]), Axis::W);
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let unit = row(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&unit, Axis::W).0, unit);
        let (z, _) = l2_normalize(&row(&[0.0, 0.0]), Axis::W);
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_any_axis_gives_unit_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor4::<f64>::uniform(Dims::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
        for axis in [Axis::N, Axis::C, Axis::H, Axis::W] {
            let (y, _) = l2_normalize(&x, axis);
            let mut checked = 0;
            for_each_slice(x.dims(), axis, |base, stride, len| {
                let n: f64 = (0..len).map(|k| y.data()[base + k * stride].powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-12);
                checked += 1;
            });
            assert_eq!(checked * x.dims().to_array()[axis as usize], x.len());
        }
    }
}
