use crate::error::{shape_err, Result};
use crate::ops::{axpy, dot, for_each_chunk};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Per-(n,c) matrix product: `(n,c,M,K)·(n,c,K,L) → (n,c,M,L)`.
pub fn matmul_batched<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.n != bd.n || ad.c != bd.c || ad.w != bd.h {
        return Err(shape_err!("matmul_batched: {ad} · {bd} mismatch"));
    }
    let (m, k, l) = (ad.h, ad.w, bd.w);
    let mut out = Tensor4::zeros(Dims::new(ad.n, ad.c, m, l));
    let (av, bv) = (a.data(), b.data());
    for_each_chunk(out.data_mut(), m * l, |p, c| {
        let am = &av[p * m * k..(p + 1) * m * k];
        let bm = &bv[p * k * l..(p + 1) * k * l];
        for i in 0..m {
            let crow = &mut c[i * l..(i + 1) * l];
            for kk in 0..k {
                axpy(crow, am[i * k + kk], &bm[kk * l..(kk + 1) * l]);
            }
        }
    });
    Ok(out)
}

/// Gradients of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    dy: &Tensor4<T>,
    need: [bool; 2],
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let (ad, bd) = (a.dims(), b.dims());
    let (m, k, l) = (ad.h, ad.w, bd.w);
    let (av, bv, gv) = (a.data(), b.data(), dy.data());
    let da = need[0].then(|| {
        let mut da = Tensor4::zeros(ad);
        for_each_chunk(da.data_mut(), m * k, |p, dam| {
            let bm = &bv[p * k * l..(p + 1) * k * l];
            let gm = &gv[p * m * l..(p + 1) * m * l];
            for i in 0..m {
                for kk in 0..k {
                    dam[i * k + kk] = dot(&gm[i * l..(i + 1) * l], &bm[kk * l..(kk + 1) * l]);
                }
            }
        });
        da
    });
    let db = need[1].then(|| {
        let mut db = Tensor4::zeros(bd);
        for_each_chunk(db.data_mut(), k * l, |p, dbm| {
            let am = &av[p * m * k..(p + 1) * m * k];
            let gm = &gv[p * m * l..(p + 1) * m * l];
            for i in 0..m {
                for kk in 0..k {
                    axpy(&mut dbm[kk * l..(kk + 1) * l], am[i * k + kk], &gm[i * l..(i + 1) * l]);
                }
            }
        });
        db
    });
    (da, db)
}
