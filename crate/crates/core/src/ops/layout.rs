use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Moves each r×r spatial block into channels:
/// `(n,c,h,w) → (n,c·r²,h/r,w/r)` with `c' = c·r² + dy·r + dx`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if r == 0 || d.h % r != 0 || d.w % r != 0 {
        return Err(shape_err!("pixel_unshuffle: {d} not divisible by factor {r}"));
    }
    let od = Dims::new(d.n, d.c * r * r, d.h / r, d.w / r);
    Ok(Tensor4::from_fn(od, |n, co, y, xx| {
        let (c, rem) = (co / (r * r), co % (r * r));
        let (dy, dx) = (rem / r, rem % r);
        x.at(n, c, y * r + dy, xx * r + dx)
    }))
}

/// Exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if r == 0 || d.c % (r * r) != 0 {
        return Err(shape_err!("pixel_shuffle: {d} channels not divisible by {}", r * r));
    }
    let od = Dims::new(d.n, d.c / (r * r), d.h * r, d.w * r);
    Ok(Tensor4::from_fn(od, |n, c, y, xx| {
        let co = c * r * r + (y % r) * r + xx % r;
        x.at(n, co, y / r, xx / r)
    }))
}

/// Swaps the H and W axes.
pub fn transpose_last<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let d = x.dims();
    let od = Dims::new(d.n, d.c, d.w, d.h);
    let mut out = Tensor4::zeros(od);
    let (xs, plane) = (x.data(), d.plane());
    for (p, oplane) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let src = &xs[p * plane..(p + 1) * plane];
        for y in 0..d.h {
            for xx in 0..d.w {
                oplane[xx * d.h + y] = src[y * d.w + xx];
            }
        }
    }
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.n != bd.n || ad.h != bd.h || ad.w != bd.w {
        return Err(shape_err!("concat_channels: {ad} and {bd} disagree"));
    }
    let od = Dims::new(ad.n, ad.c + bd.c, ad.h, ad.w);
    let (sa, sb) = (ad.c * ad.plane(), bd.c * bd.plane());
    let mut data = Vec::with_capacity(od.len());
    for n in 0..ad.n {
        data.extend_from_slice(&a.data()[n * sa..(n + 1) * sa]);
        data.extend_from_slice(&b.data()[n * sb..(n + 1) * sb]);
    }
    Tensor4::from_vec(od, data)
}

/// Splits along channels at the given boundaries (`sizes` must sum to c).
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let d = x.dims();
    if sizes.iter().sum::<usize>() != d.c {
        return Err(shape_err!("split_channels: {sizes:?} does not partition {d}"));
    }
    let plane = d.plane();
    let mut out: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(d.n * s * plane)).collect();
    for n in 0..d.n {
        let mut c0 = 0;
        for (k, &s) in sizes.iter().enumerate() {
            let start = (n * d.c + c0) * plane;
            out[k].extend_from_slice(&x.data()[start..start + s * plane]);
            c0 += s;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(v, &s)| Tensor4::from_vec(Dims::new(d.n, s, d.h, d.w), v))
        .collect()
}

/// Channels `start..start+len` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor4<T>, start: usize, len: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if start + len > d.c {
        return Err(shape_err!("slice_channels: {start}..{} out of range for {d}", start + len));
    }
    let plane = d.plane();
    let mut data = Vec::with_capacity(d.n * len * plane);
    for n in 0..d.n {
        let s = (n * d.c + start) * plane;
        data.extend_from_slice(&x.data()[s..s + len * plane]);
    }
    Tensor4::from_vec(Dims::new(d.n, len, d.h, d.w), data)
}

/// Adjoint of [`slice_channels`]: embeds `dy` into zeros shaped `orig`.
pub fn slice_channels_backward<T: Scalar>(dy: &Tensor4<T>, start: usize, orig: Dims) -> Tensor4<T> {
    let d = dy.dims();
    let plane = d.plane();
    let mut out = Tensor4::zeros(orig);
    for n in 0..d.n {
        let s = (n * orig.c + start) * plane;
        out.data_mut()[s..s + d.c * plane]
            .copy_from_slice(&dy.data()[n * d.c * plane..(n + 1) * d.c * plane]);
    }
    out
}

/// Keeps the top-left `h×w` region of every plane.
pub fn crop<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if h > d.h || w > d.w {
        return Err(shape_err!("crop: {h}×{w} exceeds {d}"));
    }
    Ok(Tensor4::from_fn(Dims::new(d.n, d.c, h, w), |n, c, y, xx| {
        x.at(n, c, y, xx)
    }))
}

/// Adjoint of [`crop`]: zero-pads `dy` back to `orig`.
pub fn pad_crop_backward<T: Scalar>(dy: &Tensor4<T>, orig: Dims) -> Tensor4<T> {
    let d = dy.dims();
    let mut out = Tensor4::zeros(orig);
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..d.h {
                for x in 0..d.w {
                    out.data_mut()[orig.index(n, c, y, x)] = dy.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// Mirror index without repeating the edge sample, valid for any offset.
#[inline]
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Reflect-pads bottom and right edges to `h×w`.
pub fn pad_reflect<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if h < d.h || w < d.w {
        return Err(shape_err!("pad_reflect: target {h}×{w} smaller than {d}"));
    }
    Ok(Tensor4::from_fn(Dims::new(d.n, d.c, h, w), |n, c, y, xx| {
        x.at(n, c, reflect(y, d.h), reflect(xx, d.w))
    }))
}

pub fn pad_reflect_backward<T: Scalar>(dy: &Tensor4<T>, orig: Dims) -> Tensor4<T> {
    let d = dy.dims();
    let mut out = Tensor4::zeros(orig);
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..d.h {
                for x in 0..d.w {
                    let i = orig.index(n, c, reflect(y, orig.h), reflect(x, orig.w));
                    out.data_mut()[i] += dy.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// Looks up `table` (n×c×1×L) through `index` into an n×c×rows×cols map.
pub fn gather_table<T: Scalar>(
    table: &Tensor4<T>,
    index: &[usize],
    rows: usize,
    cols: usize,
) -> Result<Tensor4<T>> {
    let d = table.dims();
    if d.h != 1 {
        return Err(shape_err!("gather_table: table {d} must have h == 1"));
    }
    if index.len() != rows * cols {
        return Err(shape_err!(
            "gather_table: {} indices for a {rows}×{cols} map",
            index.len()
        ));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= d.w) {
        return Err(shape_err!("gather_table: index {bad} out of range for {d}"));
    }
    let od = Dims::new(d.n, d.c, rows, cols);
    let mut out = Tensor4::zeros(od);
    for (p, oplane) in out.data_mut().chunks_mut(rows * cols).enumerate() {
        let src = &table.data()[p * d.w..(p + 1) * d.w];
        for (o, &i) in oplane.iter_mut().zip(index) {
            *o = src[i];
        }
    }
    Ok(out)
}

pub fn gather_table_backward<T: Scalar>(dy: &Tensor4<T>, index: &[usize], table: Dims) -> Tensor4<T> {
    let mut out = Tensor4::zeros(table);
    let plane = dy.dims().plane();
    for (p, gplane) in dy.data().chunks(plane).enumerate() {
        let dst = &mut out.data_mut()[p * table.w..(p + 1) * table.w];
        for (&g, &i) in gplane.iter().zip(index) {
            dst[i] += g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unshuffle_and_shuffle_fixtures() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.dims(), Dims::new(1, 4, 1, 1));
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
        let y = Tensor4::from_vec(Dims::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pixel_shuffle(&y, 2).unwrap(), x);
        assert!(pixel_unshuffle(&Tensor4::<f64>::zeros(Dims::new(1, 1, 3, 2)), 2).is_err());
        assert!(pixel_shuffle(&Tensor4::<f64>::zeros(Dims::new(1, 3, 1, 1)), 2).is_err());
    }

    #[test]
    fn reflect_pad_handles_long_pads_and_crop_inverts() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&x, 2, 8).unwrap();
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(crop(&p, 1, 3).unwrap(), x);
    }

    #[test]
    fn gather_rejects_bad_index() {
        let t = Tensor4::<f64>::zeros(Dims::new(1, 1, 1, 3));
        assert!(gather_table(&t, &[0, 3], 1, 2).is_err());
        assert!(gather_table(&t, &[0, 1, 2], 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn shuffle_inverts_unshuffle(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let d = Dims::new(n, c, 2 * h, 2 * w);
            let x = Tensor4::<f64>::from_fn(d, |a, b, y, xx| ((a * 131 + b * 31 + y * 7 + xx) as f64 + seed as f64).sin());
            let back = pixel_shuffle(&pixel_unshuffle(&x, 2).unwrap(), 2).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn concat_then_split_round_trips(ca in 1usize..4, cb in 1usize..4) {
            let a = Tensor4::<f64>::arange(Dims::new(2, ca, 2, 3));
            let b = Tensor4::<f64>::full(Dims::new(2, cb, 2, 3), -1.0);
            let parts = split_channels(&concat_channels(&a, &b).unwrap(), &[ca, cb]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &b);
        }
    }
}
