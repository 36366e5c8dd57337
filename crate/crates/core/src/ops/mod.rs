//! Pure tensor primitives and their vector-Jacobian products.
//!
//! Every function here leaves its inputs untouched and returns fresh
//! tensors. The tape in [`crate::autodiff`] records these calls and
//! dispatches to the `*_backward` companions.

mod activation;
mod conv;
mod elementwise;
mod layout;
mod linalg;
mod norm;

pub use activation::{exp, gelu, gelu_backward, l2_normalize, l2_normalize_backward, softmax_lastdim, softmax_lastdim_backward, Axis, L2_EPS};
pub use conv::{
    conv2d, conv2d_backward, conv_depthwise, conv_depthwise_backward, conv_pointwise,
    conv_pointwise_backward, ConvGrads,
};
pub use elementwise::{add, broadcast_reduce, mul, mul_backward, scale};
pub use layout::{
    concat_channels, crop, gather_table, gather_table_backward, pad_crop_backward, pad_reflect,
    pad_reflect_backward, pixel_shuffle, pixel_unshuffle, slice_channels, slice_channels_backward, split_channels,
    transpose_last,
};
pub use linalg::{matmul_batched, matmul_backward};
pub use norm::{layer_norm_channels, layer_norm_backward, LayerNormCache};

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of
/// `data`. Each chunk is produced by the same instruction sequence no matter
/// how many worker threads run, so results do not depend on thread count.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[inline]
pub(crate) fn axpy<T: crate::Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: crate::Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
