//! Hierarchical window/grid attention image restoration network with a
//! small tape autodiff, re-parameterizable feed-forward blocks, and cost
//! analysis.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod harness;
pub mod network;
pub mod nn;
pub mod ops;
pub mod params;
pub mod partition;
pub mod selfcheck;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{DType, Dims, Scalar, Tensor4};

/// Sets the worker count of the global thread pool (`0` picks one per
/// core). Must run before any parallel work; later calls fail.
/// Results do not depend on the count.
#[cfg(feature = "parallel")]
pub fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Without the `parallel` feature everything runs on the calling thread.
#[cfg(not(feature = "parallel"))]
pub fn init_threads(_threads: usize) -> Result<()> {
    Ok(())
}
