use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// `b` broadcasts onto `a` when each of its extents equals `a`'s or is 1.
fn broadcast_strides(a: Dims, b: Dims) -> Result<[usize; 4]> {
    let (ae, be) = (a.to_array(), b.to_array());
    let bs = b.strides();
    let mut out = [0; 4];
    for i in 0..4 {
        if be[i] == ae[i] {
            out[i] = bs[i];
        } else if be[i] == 1 {
            out[i] = 0;
        } else {
            return Err(shape_err!("cannot broadcast {b} onto {a}"));
        }
    }
    Ok(out)
}

fn zip_broadcast<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    let ad = a.dims();
    if ad == b.dims() {
        return a.zip_map(b, f);
    }
    let bs = broadcast_strides(ad, b.dims())?;
    let mut out = Tensor4::zeros(ad);
    let (av, bv) = (a.data(), b.data());
    let o = out.data_mut();
    let mut i = 0;
    for n in 0..ad.n {
        for c in 0..ad.c {
            for y in 0..ad.h {
                let brow = n * bs[0] + c * bs[1] + y * bs[2];
                for x in 0..ad.w {
                    o[i] = f(av[i], bv[brow + x * bs[3]]);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// `a + b` with `b` broadcast onto `a`.
pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_broadcast(a, b, |x, y| x + y)
}

/// `a ⊙ b` with `b` broadcast onto `a`.
pub fn mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_broadcast(a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor4<T>, s: T) -> Tensor4<T> {
    x.map(|v| v * s)
}

/// Sums `g` (shaped like the broadcast result) back down to `target` dims.
pub fn broadcast_reduce<T: Scalar>(g: &Tensor4<T>, target: Dims) -> Tensor4<T> {
    let gd = g.dims();
    if gd == target {
        return g.clone();
    }
    let bs = broadcast_strides(gd, target).expect("reduce target was validated in forward");
    let mut out = Tensor4::zeros(target);
    let o = out.data_mut();
    let gv = g.data();
    let mut i = 0;
    for n in 0..gd.n {
        for c in 0..gd.c {
            for y in 0..gd.h {
                let brow = n * bs[0] + c * bs[1] + y * bs[2];
                for x in 0..gd.w {
                    o[brow + x * bs[3]] += gv[i];
                    i += 1;
                }
            }
        }
    }
    out
}

/// Gradients of `mul(a, b)`.
pub fn mul_backward<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    dy: &Tensor4<T>,
    need: [bool; 2],
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let da = need[0].then(|| mul(dy, b).expect("dims validated in forward"));
    let db = need[1].then(|| {
        let full = dy.zip_map(a, |g, v| g * v).expect("dims validated in forward");
        broadcast_reduce(&full, b.dims())
    });
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_over_batch_and_rows() {
        let a = Tensor4::<f64>::arange(Dims::new(2, 2, 2, 2));
        let b = Tensor4::from_vec(Dims::new(1, 2, 1, 2), vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
        let s = add(&a, &b).unwrap();
        assert_eq!(s.at(1, 1, 1, 1), 15.0 + 1000.0);
        assert_eq!(s.at(0, 0, 1, 0), 2.0 + 1.0);
        let r = broadcast_reduce(&Tensor4::<f64>::ones(a.dims()), b.dims());
        assert_eq!(r.data(), &[4.0; 4]);
        assert!(add(&b, &a).is_err());
    }
}
