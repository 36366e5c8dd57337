//! Lossless spatial rearrangements used by the two attention flavours.
//!
//! * window partition: non-overlapping p×p tiles, raster order
//! * cyclic shift: toroidal roll of the feature map
//! * grid partition: group `(py, px)` gathers pixel `(py, px)` of every
//!   cubby of a g×g grid, i.e. a dilated sampling with stride `(h/g, w/g)`
//!
//! Every partition has an exact inverse; round trips are bit-exact.

use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Window size `p` plus the cyclic shift `s` applied before partitioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(window: usize, shift: usize) -> Self {
        Self { window, shift }
    }

    /// Unshifted branch layout.
    pub fn plain(window: usize) -> Self {
        Self::new(window, 0)
    }

    /// Half-window shift, the usual shifted-window convention.
    pub fn shifted(window: usize) -> Self {
        Self::new(window, window / 2)
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        let p = self.window;
        if p == 0 || dims.h % p != 0 || dims.w % p != 0 {
            return Err(shape_err!("window {p} does not tile {dims}"));
        }
        if self.shift >= p {
            return Err(shape_err!("shift {} must be below window {p}", self.shift));
        }
        Ok(())
    }

    pub fn count(&self, dims: Dims) -> (usize, usize) {
        (dims.h / self.window, dims.w / self.window)
    }
}

/// A uniform g×g grid of cubbies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub grid: usize,
}

impl GridLayout {
    pub fn new(grid: usize) -> Self {
        Self { grid }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        let g = self.grid;
        if g == 0 || dims.h % g != 0 || dims.w % g != 0 {
            return Err(shape_err!("grid {g} does not divide {dims}"));
        }
        Ok(())
    }

    /// Cubby extent `(h/g, w/g)`; also the number of groups per axis.
    pub fn cubby(&self, dims: Dims) -> (usize, usize) {
        (dims.h / self.grid, dims.w / self.grid)
    }

    pub fn groups(&self, dims: Dims) -> usize {
        dims.plane() / (self.grid * self.grid)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest divisor of `gcd(h, w)` not exceeding `size`, so the result tiles
/// an h×w map exactly. Used for both window and grid sizes on small maps.
pub fn effective_size(size: usize, h: usize, w: usize) -> usize {
    let g = gcd(h, w).max(1);
    (1..=size.min(g)).rev().find(|d| g % d == 0).unwrap_or(1)
}

/// Splits `x` into `(n·nW)×c×p×p` windows, top-left window first.
pub fn window_partition<T: Scalar>(x: &Tensor4<T>, window: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    WindowLayout::plain(window).validate(d)?;
    let p = window;
    let (wy, wx) = (d.h / p, d.w / p);
    let od = Dims::new(d.n * wy * wx, d.c, p, p);
    let mut out = Vec::with_capacity(d.len());
    for n in 0..d.n {
        for by in 0..wy {
            for bx in 0..wx {
                for c in 0..d.c {
                    let plane = x.plane(n, c);
                    for y in 0..p {
                        let row = (by * p + y) * d.w + bx * p;
                        out.extend_from_slice(&plane[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor4::from_vec(od, out)
}

/// Inverse of [`window_partition`] for an original tensor of `dims`.
pub fn window_reverse<T: Scalar>(windows: &Tensor4<T>, window: usize, dims: Dims) -> Result<Tensor4<T>> {
    WindowLayout::plain(window).validate(dims)?;
    let p = window;
    let (wy, wx) = (dims.h / p, dims.w / p);
    let expect = Dims::new(dims.n * wy * wx, dims.c, p, p);
    if windows.dims() != expect {
        return Err(shape_err!(
            "window_reverse: got {} windows tensor, expected {expect} for {dims}",
            windows.dims()
        ));
    }
    let mut out = Tensor4::zeros(dims);
    let src = windows.data();
    let o = out.data_mut();
    let mut i = 0;
    for n in 0..dims.n {
        for by in 0..wy {
            for bx in 0..wx {
                for c in 0..dims.c {
                    for y in 0..p {
                        let dst = dims.index(n, c, by * p + y, bx * p);
                        o[dst..dst + p].copy_from_slice(&src[i..i + p]);
                        i += p;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Toroidal roll by `(-s, -s)`: `out[y][x] = in[(y+s) mod h][(x+s) mod w]`.
/// A negative `s` undoes a positive one.
pub fn cyclic_shift<T: Scalar>(x: &Tensor4<T>, s: isize) -> Tensor4<T> {
    let d = x.dims();
    if s == 0 || d.is_empty() {
        return x.clone();
    }
    let sy = s.rem_euclid(d.h as isize) as usize;
    let sx = s.rem_euclid(d.w as isize) as usize;
    let mut out = Tensor4::zeros(d);
    for (p, oplane) in out.data_mut().chunks_mut(d.plane()).enumerate() {
        let src = &x.data()[p * d.plane()..(p + 1) * d.plane()];
        for y in 0..d.h {
            let sr = ((y + sy) % d.h) * d.w;
            let orow = &mut oplane[y * d.w..(y + 1) * d.w];
            orow[..d.w - sx].copy_from_slice(&src[sr + sx..sr + d.w]);
            orow[d.w - sx..].copy_from_slice(&src[sr..sr + sx]);
        }
    }
    out
}

/// Gathers same-position pixels of every cubby: `(n·h·w/g²)×c×g×g`.
pub fn grid_partition<T: Scalar>(x: &Tensor4<T>, grid: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    let layout = GridLayout::new(grid);
    layout.validate(d)?;
    let g = grid;
    let (ch, cw) = layout.cubby(d);
    let od = Dims::new(d.n * ch * cw, d.c, g, g);
    let mut out = Vec::with_capacity(d.len());
    for n in 0..d.n {
        for py in 0..ch {
            for px in 0..cw {
                for c in 0..d.c {
                    let plane = x.plane(n, c);
                    for gy in 0..g {
                        for gx in 0..g {
                            out.push(plane[(gy * ch + py) * d.w + gx * cw + px]);
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec(od, out)
}

/// Inverse of [`grid_partition`].
pub fn grid_reverse<T: Scalar>(groups: &Tensor4<T>, grid: usize, dims: Dims) -> Result<Tensor4<T>> {
    let layout = GridLayout::new(grid);
    layout.validate(dims)?;
    let g = grid;
    let (ch, cw) = layout.cubby(dims);
    let expect = Dims::new(dims.n * ch * cw, dims.c, g, g);
    if groups.dims() != expect {
        return Err(shape_err!(
            "grid_reverse: got {} groups tensor, expected {expect} for {dims}",
            groups.dims()
        ));
    }
    let mut out = Tensor4::zeros(dims);
    let src = groups.data();
    let o = out.data_mut();
    let mut i = 0;
    for n in 0..dims.n {
        for py in 0..ch {
            for px in 0..cw {
                for c in 0..dims.c {
                    for gy in 0..g {
                        for gx in 0..g {
                            o[dims.index(n, c, gy * ch + py, gx * cw + px)] = src[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn effective_size_divides_both_sides() {
        assert_eq!(effective_size(32, 64, 64), 32);
        assert_eq!(effective_size(32, 16, 16), 16);
        assert_eq!(effective_size(16, 48, 48), 16);
        assert_eq!(effective_size(16, 24, 24), 12);
        assert_eq!(effective_size(8, 6, 12), 6);
        assert_eq!(effective_size(4, 7, 5), 1);
        for h in 1..40 {
            for w in 1..40 {
                let e = effective_size(8, h, w);
                assert!(e >= 1 && e <= 8 && h % e == 0 && w % e == 0);
            }
        }
    }

    fn raster16() -> Tensor4 {
        Tensor4::arange(Dims::new(1, 1, 4, 4))
    }

    #[test]
    fn first_window_is_top_left_block() {
        let w = window_partition(&raster16(), 2).unwrap();
        assert_eq!(w.dims(), Dims::new(4, 1, 2, 2));
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn whole_map_window_is_identity() {
        let x = raster16();
        assert_eq!(window_partition(&x, 4).unwrap(), x);
        assert_eq!(window_reverse(&x, 4, x.dims()).unwrap(), x);
    }

    #[test]
    fn window_reverse_rejects_wrong_count() {
        let w = Tensor4::<f64>::zeros(Dims::new(3, 1, 2, 2));
        assert!(window_reverse(&w, 2, Dims::new(1, 1, 4, 4)).is_err());
        assert!(window_partition(&Tensor4::<f64>::zeros(Dims::new(1, 1, 5, 4)), 2).is_err());
    }

    #[test]
    fn hand_rolled_shift() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cyclic_shift(&x, 0), x);
        assert_eq!(cyclic_shift(&x, 1).data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(cyclic_shift(&cyclic_shift(&x, 1), -1), x);
    }

    #[test]
    fn grid_group_collects_same_cubby_position() {
        let gp = grid_partition(&raster16(), 2).unwrap();
        assert_eq!(gp.dims(), Dims::new(4, 1, 2, 2));
        assert_eq!(&gp.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(&gp.data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn degenerate_grids() {
        let x = raster16();
        // g == h == w: one group, the whole map.
        assert_eq!(grid_partition(&x, 4).unwrap(), x);
        // g == 1: every pixel is its own group; reverse is the identity map.
        let ones = grid_partition(&x, 1).unwrap();
        assert_eq!(ones.dims(), Dims::new(16, 1, 1, 1));
        assert_eq!(grid_reverse(&ones, 1, x.dims()).unwrap(), x);
        assert!(grid_reverse(&ones, 2, x.dims()).is_err());
    }

    fn sample(d: Dims, seed: u64) -> Tensor4 {
        Tensor4::from_fn(d, |n, c, y, x| ((n * 1009 + c * 131 + y * 17 + x) as f64 * 0.37 + seed as f64).sin())
    }

    proptest! {
        #[test]
        fn window_round_trip(p in 1usize..5, wy in 1usize..4, wx in 1usize..4, c in 1usize..3, seed in 0u64..100) {
            let x = sample(Dims::new(2, c, p * wy, p * wx), seed);
            let w = window_partition(&x, p).unwrap();
            let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = w.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(window_reverse(&w, p, x.dims()).unwrap(), x);
        }

        #[test]
        fn shift_round_trip(h in 1usize..9, w in 1usize..9, s in 0isize..8) {
            let x = sample(Dims::new(1, 2, h, w), 3);
            prop_assert_eq!(cyclic_shift(&cyclic_shift(&x, s), -s), x);
        }

        #[test]
        fn grid_round_trip(g in 1usize..5, cy in 1usize..4, cx in 1usize..4, seed in 0u64..100) {
            let x = sample(Dims::new(2, 3, g * cy, g * cx), seed);
            let gp = grid_partition(&x, g).unwrap();
            prop_assert_eq!(gp.dims().n, 2 * cy * cx);
            prop_assert_eq!(grid_reverse(&gp, g, x.dims()).unwrap(), x);
        }
    }
}
