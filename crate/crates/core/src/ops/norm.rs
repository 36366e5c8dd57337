use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor4};

/// Per-pixel statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes across channels independently at every (n, y, x), then
/// applies the per-channel affine `scale·x̂ + shift`.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor4<T>,
    scale: &Tensor4<T>,
    shift: &Tensor4<T>,
    eps: f64,
) -> Result<(Tensor4<T>, LayerNormCache<T>)> {
    let d = x.dims();
    if !(eps > 0.0) {
        return Err(config_err!("layer_norm_channels: eps must be > 0, got {eps}"));
    }
    if scale.len() != d.c || shift.len() != d.c {
        return Err(shape_err!(
            "layer_norm_channels: input {d} vs scale {} / shift {}",
            scale.dims(),
            shift.dims()
        ));
    }
    let plane = d.plane();
    let inv_c = T::one() / T::from_usize(d.c);
    let eps = T::from_f64(eps);
    let mut xhat = Tensor4::zeros(d);
    let mut out = Tensor4::zeros(d);
    let mut inv_std = vec![T::zero(); d.n * plane];
    for n in 0..d.n {
        let sample = &x.data()[n * d.c * plane..(n + 1) * d.c * plane];
        let mut mean = vec![T::zero(); plane];
        for ch in sample.chunks(plane) {
            for (m, &v) in mean.iter_mut().zip(ch) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); plane];
        for ch in sample.chunks(plane) {
            for ((s, &v), &m) in var.iter_mut().zip(ch).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let istd = &mut inv_std[n * plane..(n + 1) * plane];
        for (i, s) in istd.iter_mut().zip(&var) {
            *i = T::one() / (*s * inv_c + eps).sqrt();
        }
        let xh = &mut xhat.data_mut()[n * d.c * plane..(n + 1) * d.c * plane];
        let o = &mut out.data_mut()[n * d.c * plane..(n + 1) * d.c * plane];
        for c in 0..d.c {
            let (g, b) = (scale.data()[c], shift.data()[c]);
            let r = c * plane..(c + 1) * plane;
            for (((xv, ov), &v), (&m, &is)) in xh[r.clone()]
                .iter_mut()
                .zip(&mut o[r.clone()])
                .zip(&sample[r])
                .zip(mean.iter().zip(istd.iter()))
            {
                *xv = (v - m) * is;
                *ov = *xv * g + b;
            }
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dscale, dshift)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    scale: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let d = dy.dims();
    let plane = d.plane();
    let inv_c = T::one() / T::from_usize(d.c);
    let mut dx = Tensor4::zeros(d);
    let mut dscale = Tensor4::zeros(scale.dims());
    let mut dshift = Tensor4::zeros(scale.dims());
    for n in 0..d.n {
        let span = n * d.c * plane..(n + 1) * d.c * plane;
        let g = &dy.data()[span.clone()];
        let xh = &cache.xhat.data()[span.clone()];
        let mut mean_g = vec![T::zero(); plane];
        let mut mean_gx = vec![T::zero(); plane];
        for c in 0..d.c {
            let gamma = scale.data()[c];
            let r = c * plane..(c + 1) * plane;
            let mut ds = T::zero();
            let mut db = T::zero();
            for (i, (&gv, &xv)) in g[r.clone()].iter().zip(&xh[r]).enumerate() {
                ds += gv * xv;
                db += gv;
                let gh = gv * gamma;
                mean_g[i] += gh;
                mean_gx[i] += gh * xv;
            }
            dscale.data_mut()[c] += ds;
            dshift.data_mut()[c] += db;
        }
        let istd = &cache.inv_std[n * plane..(n + 1) * plane];
        let out = &mut dx.data_mut()[span];
        for c in 0..d.c {
            let gamma = scale.data()[c];
            let r = c * plane..(c + 1) * plane;
            for (i, ((o, &gv), &xv)) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]).enumerate() {
                *o = istd[i] * (gv * gamma - mean_g[i] * inv_c - xv * mean_gx[i] * inv_c);
            }
        }
    }
    (dx, dscale, dshift)
}
