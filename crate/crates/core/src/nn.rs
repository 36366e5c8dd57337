//! Named-layer helpers: each layer owns `{name}.weight` / `{name}.bias`
//! (or `{name}.scale` / `{name}.shift`) in a parameter store.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, join, ParamStore, Scope};
use crate::tensor::{Dims, Scalar, Tensor4};

pub const LN_EPS: f64 = 1e-6;

pub fn pointwise<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    let l = s.child(name);
    tape.conv_pointwise(x, l.var("weight")?, Some(l.var("bias")?))
}

pub fn depthwise<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    let l = s.child(name);
    tape.conv_depthwise(x, l.var("weight")?, Some(l.var("bias")?))
}

pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    let l = s.child(name);
    tape.conv2d(x, l.var("weight")?, Some(l.var("bias")?))
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    let l = s.child(name);
    tape.layer_norm_channels(x, l.var("scale")?, l.var("shift")?, LN_EPS)
}

pub fn vector(c: usize) -> Dims {
    Dims::new(1, c, 1, 1)
}

pub fn init_pointwise<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<()> {
    init_dense(store, name, c_in, c_out, 1, rng)
}

pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = c_in * k * k;
    store.insert(join(name, "weight"), fan_in_uniform(Dims::new(c_out, c_in, k, k), fan_in, rng))?;
    store.insert(join(name, "bias"), fan_in_uniform(vector(c_out), fan_in, rng))
}

pub fn init_depthwise<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    c: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(join(name, "weight"), fan_in_uniform(Dims::new(c, 1, k, k), k * k, rng))?;
    store.insert(join(name, "bias"), fan_in_uniform(vector(c), k * k, rng))
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.insert(join(name, "scale"), Tensor4::ones(vector(c)))?;
    store.insert(join(name, "shift"), Tensor4::zeros(vector(c)))
}

/// Zeroes `{name}.weight` and `{name}.bias`.
pub fn zero_layer(store: &mut ParamStore, name: &str) -> Result<()> {
    for part in ["weight", "bias"] {
        store.get_mut(&join(name, part))?.data_mut().fill(0.0);
    }
    Ok(())
}
