use crate::error::{config_err, shape_err, Result};
use crate::ops::{axpy, dot, for_each_chunk};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Gradients of a convolution with respect to each of its operands.
#[derive(Debug)]
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor4<T>>,
    pub weight: Option<Tensor4<T>>,
    pub bias: Option<Tensor4<T>>,
}

fn check_bias<T: Scalar>(bias: Option<&Tensor4<T>>, c: usize, what: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != c {
            return Err(shape_err!(
                "{what}: bias {} does not hold {c} values",
                b.dims()
            ));
        }
    }
    Ok(())
}

/// 1×1 convolution: `out[n,o] = Σ_i w[o,i]·x[n,i] + b[o]`.
pub fn conv_pointwise<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let wd = weight.dims();
    if wd.h != 1 || wd.w != 1 || wd.c != xd.c {
        return Err(shape_err!(
            "conv_pointwise: input {xd} incompatible with weight {wd}"
        ));
    }
    check_bias(bias, wd.n, "conv_pointwise")?;
    let (c_in, c_out, plane) = (xd.c, wd.n, xd.plane());
    let od = Dims::new(xd.n, c_out, xd.h, xd.w);
    let mut out = Tensor4::zeros(od);
    let w = weight.data();
    let xs = x.data();
    for_each_chunk(out.data_mut(), c_out * plane, |n, sample| {
        let xin = &xs[n * c_in * plane..(n + 1) * c_in * plane];
        for (o, oplane) in sample.chunks_mut(plane).enumerate() {
            if let Some(b) = bias {
                oplane.fill(b.data()[o]);
            }
            for i in 0..c_in {
                axpy(oplane, w[o * c_in + i], &xin[i * plane..(i + 1) * plane]);
            }
        }
    });
    Ok(out)
}

pub fn conv_pointwise_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    has_bias: bool,
    dy: &Tensor4<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xd = x.dims();
    let (c_in, c_out, plane) = (xd.c, weight.dims().n, xd.plane());
    let w = weight.data();
    let g = dy.data();
    let xs = x.data();

    let input = need[0].then(|| {
        let mut dx = Tensor4::zeros(xd);
        for_each_chunk(dx.data_mut(), c_in * plane, |n, sample| {
            let gs = &g[n * c_out * plane..(n + 1) * c_out * plane];
            for (i, iplane) in sample.chunks_mut(plane).enumerate() {
                for o in 0..c_out {
                    axpy(iplane, w[o * c_in + i], &gs[o * plane..(o + 1) * plane]);
                }
            }
        });
        dx
    });
    let weight_grad = need[1].then(|| {
        let mut dw = Tensor4::zeros(weight.dims());
        for_each_chunk(dw.data_mut(), c_in, |o, row| {
            for n in 0..xd.n {
                let gp = &g[(n * c_out + o) * plane..(n * c_out + o + 1) * plane];
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot += dot(gp, &xs[(n * c_in + i) * plane..(n * c_in + i + 1) * plane]);
                }
            }
        });
        dw
    });
    let bias = (need[2] && has_bias).then(|| {
        let mut db = Tensor4::zeros(Dims::new(1, c_out, 1, 1));
        for (o, slot) in db.data_mut().iter_mut().enumerate() {
            for n in 0..xd.n {
                *slot += g[(n * c_out + o) * plane..(n * c_out + o + 1) * plane]
                    .iter()
                    .copied()
                    .sum();
            }
        }
        db
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Valid output/input index ranges for a kernel tap at signed offset `d`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// `out += correlate(inp, kernel)` with zero padding of `k/2`.
fn correlate_acc<T: Scalar>(out: &mut [T], inp: &[T], h: usize, w: usize, kernel: &[T], k: usize) {
    let r = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - r;
        let (y0, y1) = tap_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - r;
            let (x0, x1) = tap_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let wt = kernel[ky * k + kx];
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let ix0 = (x0 as isize + dx) as usize;
                axpy(
                    &mut out[y * w + x0..y * w + x1],
                    wt,
                    &inp[iy * w + ix0..iy * w + ix0 + (x1 - x0)],
                );
            }
        }
    }
}

/// Adjoint of [`correlate_acc`] with respect to its input plane.
fn correlate_adjoint_acc<T: Scalar>(
    dinp: &mut [T],
    dout: &[T],
    h: usize,
    w: usize,
    kernel: &[T],
    k: usize,
) {
    let r = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - r;
        let (y0, y1) = tap_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - r;
            let (x0, x1) = tap_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let wt = kernel[ky * k + kx];
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let ix0 = (x0 as isize + dx) as usize;
                axpy(
                    &mut dinp[iy * w + ix0..iy * w + ix0 + (x1 - x0)],
                    wt,
                    &dout[y * w + x0..y * w + x1],
                );
            }
        }
    }
}

/// Gradient of [`correlate_acc`] with respect to the kernel taps.
fn correlate_kernel_grad_acc<T: Scalar>(
    dk: &mut [T],
    dout: &[T],
    inp: &[T],
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - r;
        let (y0, y1) = tap_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - r;
            let (x0, x1) = tap_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let mut acc = T::zero();
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let ix0 = (x0 as isize + dx) as usize;
                acc += dot(
                    &dout[y * w + x0..y * w + x1],
                    &inp[iy * w + ix0..iy * w + ix0 + (x1 - x0)],
                );
            }
            dk[ky * k + kx] += acc;
        }
    }
}

fn check_kernel(k: usize, what: &str) -> Result<()> {
    if k % 2 == 0 {
        return Err(config_err!("{what}: kernel size {k} must be odd"));
    }
    Ok(())
}

/// Per-channel k×k correlation with zero "same" padding.
pub fn conv_depthwise<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let kd = kernel.dims();
    if kd.h != kd.w {
        return Err(shape_err!("conv_depthwise: kernel {kd} is not square"));
    }
    check_kernel(kd.h, "conv_depthwise")?;
    if kd.n != xd.c || kd.c != 1 {
        return Err(shape_err!(
            "conv_depthwise: input {xd} incompatible with kernel {kd}"
        ));
    }
    check_bias(bias, xd.c, "conv_depthwise")?;
    let k = kd.h;
    let kk = k * k;
    let plane = xd.plane();
    let mut out = Tensor4::zeros(xd);
    let xs = x.data();
    let ks = kernel.data();
    for_each_chunk(out.data_mut(), plane, |idx, oplane| {
        let c = idx % xd.c;
        if let Some(b) = bias {
            oplane.fill(b.data()[c]);
        }
        correlate_acc(
            oplane,
            &xs[idx * plane..(idx + 1) * plane],
            xd.h,
            xd.w,
            &ks[c * kk..(c + 1) * kk],
            k,
        );
    });
    Ok(out)
}

pub fn conv_depthwise_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    has_bias: bool,
    dy: &Tensor4<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xd = x.dims();
    let k = kernel.dims().h;
    let kk = k * k;
    let plane = xd.plane();
    let ks = kernel.data();
    let g = dy.data();
    let xs = x.data();

    let input = need[0].then(|| {
        let mut dx = Tensor4::zeros(xd);
        for_each_chunk(dx.data_mut(), plane, |idx, iplane| {
            let c = idx % xd.c;
            correlate_adjoint_acc(
                iplane,
                &g[idx * plane..(idx + 1) * plane],
                xd.h,
                xd.w,
                &ks[c * kk..(c + 1) * kk],
                k,
            );
        });
        dx
    });
    let weight = need[1].then(|| {
        let mut dk = Tensor4::zeros(kernel.dims());
        for_each_chunk(dk.data_mut(), kk, |c, taps| {
            for n in 0..xd.n {
                let idx = n * xd.c + c;
                correlate_kernel_grad_acc(
                    taps,
                    &g[idx * plane..(idx + 1) * plane],
                    &xs[idx * plane..(idx + 1) * plane],
                    xd.h,
                    xd.w,
                    k,
                );
            }
        });
        dk
    });
    let bias = (need[2] && has_bias).then(|| channel_sums(dy));
    ConvGrads {
        input,
        weight,
        bias,
    }
}

fn channel_sums<T: Scalar>(dy: &Tensor4<T>) -> Tensor4<T> {
    let d = dy.dims();
    let mut db = Tensor4::zeros(Dims::new(1, d.c, 1, 1));
    for (c, slot) in db.data_mut().iter_mut().enumerate() {
        for n in 0..d.n {
            *slot += dy.plane(n, c).iter().copied().sum();
        }
    }
    db
}

/// Dense k×k convolution (`weight` is c_out×c_in×k×k) with zero "same" padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let wd = weight.dims();
    if wd.h != wd.w || wd.c != xd.c {
        return Err(shape_err!("conv2d: input {xd} incompatible with weight {wd}"));
    }
    check_kernel(wd.h, "conv2d")?;
    check_bias(bias, wd.n, "conv2d")?;
    let (k, c_in, c_out, plane) = (wd.h, xd.c, wd.n, xd.plane());
    let kk = k * k;
    let od = Dims::new(xd.n, c_out, xd.h, xd.w);
    let mut out = Tensor4::zeros(od);
    let xs = x.data();
    let ws = weight.data();
    for_each_chunk(out.data_mut(), plane, |idx, oplane| {
        let (n, o) = (idx / c_out, idx % c_out);
        if let Some(b) = bias {
            oplane.fill(b.data()[o]);
        }
        for i in 0..c_in {
            let src = (n * c_in + i) * plane;
            correlate_acc(
                oplane,
                &xs[src..src + plane],
                xd.h,
                xd.w,
                &ws[(o * c_in + i) * kk..(o * c_in + i + 1) * kk],
                k,
            );
        }
    });
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    has_bias: bool,
    dy: &Tensor4<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xd = x.dims();
    let wd = weight.dims();
    let (k, c_in, c_out, plane) = (wd.h, xd.c, wd.n, xd.plane());
    let kk = k * k;
    let xs = x.data();
    let ws = weight.data();
    let g = dy.data();

    let input = need[0].then(|| {
        let mut dx = Tensor4::zeros(xd);
        for_each_chunk(dx.data_mut(), plane, |idx, iplane| {
            let (n, i) = (idx / c_in, idx % c_in);
            for o in 0..c_out {
                let src = (n * c_out + o) * plane;
                correlate_adjoint_acc(
                    iplane,
                    &g[src..src + plane],
                    xd.h,
                    xd.w,
                    &ws[(o * c_in + i) * kk..(o * c_in + i + 1) * kk],
                    k,
                );
            }
        });
        dx
    });
    let weight_grad = need[1].then(|| {
        let mut dw = Tensor4::zeros(wd);
        for_each_chunk(dw.data_mut(), kk, |idx, taps| {
            let (o, i) = (idx / c_in, idx % c_in);
            for n in 0..xd.n {
                let go = (n * c_out + o) * plane;
                let xi = (n * c_in + i) * plane;
                correlate_kernel_grad_acc(
                    taps,
                    &g[go..go + plane],
                    &xs[xi..xi + plane],
                    xd.h,
                    xd.w,
                    k,
                );
            }
        });
        dw
    });
    let bias = (need[2] && has_bias).then(|| channel_sums(dy));
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
