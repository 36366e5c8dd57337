use rand::Rng;

use super::{head_dim, AttentionWorkspace};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn;
use crate::params::{join, ParamStore, Scope};
use crate::partition::GridLayout;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Tensors of one GGSA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GgsaParams {
    pub heads: usize,
    pub qkv_pw_weight: Tensor4,
    pub qkv_pw_bias: Tensor4,
    /// `1×heads×1×(2g−1)²`
    pub bias_table: Tensor4,
    pub out_pw_weight: Tensor4,
    pub out_pw_bias: Tensor4,
}

const NAMES: [&str; 5] = [
    "qkv_pw.weight",
    "qkv_pw.bias",
    "bias_table",
    "out_pw.weight",
    "out_pw.bias",
];

impl GgsaParams {
    pub fn random<R: Rng + ?Sized>(c: usize, heads: usize, grid: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::default();
        init_ggsa(&mut store, "", c, heads, grid, rng)?;
        Self::from_store(&store, "", heads)
    }

    pub fn from_store(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let g = |n: &str| store.get(&join(prefix, n)).cloned();
        Ok(Self {
            heads,
            qkv_pw_weight: g(NAMES[0])?,
            qkv_pw_bias: g(NAMES[1])?,
            bias_table: g(NAMES[2])?,
            out_pw_weight: g(NAMES[3])?,
            out_pw_bias: g(NAMES[4])?,
        })
    }

    pub fn to_store(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let ts = [
            &self.qkv_pw_weight,
            &self.qkv_pw_bias,
            &self.bias_table,
            &self.out_pw_weight,
            &self.out_pw_bias,
        ];
        for (n, t) in NAMES.iter().zip(ts) {
            store.insert(join(prefix, n), t.clone())?;
        }
        Ok(())
    }
}

pub fn init_ggsa<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    heads: usize,
    grid: usize,
    rng: &mut R,
) -> Result<()> {
    head_dim(c, heads)?;
    let span = 2 * grid - 1;
    nn::init_pointwise(store, &join(prefix, "qkv_pw"), c, 3 * c, rng)?;
    store.insert(
        join(prefix, "bias_table"),
        Tensor4::zeros(Dims::new(1, heads, 1, span * span)),
    )?;
    nn::init_pointwise(store, &join(prefix, "out_pw"), c, c, rng)
}

/// Table index for every (query, key) token pair of a g×g group, looking
/// into a table built for grid `table_grid ≥ g`:
/// `(Δy + G − 1)·(2G − 1) + (Δx + G − 1)` with `Δ = pos(i) − pos(j)`.
pub fn relative_position_index(g: usize, table_grid: usize) -> Vec<usize> {
    assert!(g >= 1 && table_grid >= g);
    let span = 2 * table_grid - 1;
    let off = table_grid - 1;
    let t = g * g;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / g) as isize - (j / g) as isize;
            let dx = (i % g) as isize - (j % g) as isize;
            idx.push((dy + off as isize) as usize * span + (dx + off as isize) as usize);
        }
    }
    idx
}

/// Grid size a `(2G−1)²` table was built for.
fn table_grid(len: usize) -> Result<usize> {
    let span = (len as f64).sqrt().round() as usize;
    if span * span != len || span % 2 == 0 {
        return Err(shape_err!("bias table of length {len} is not (2g−1)²"));
    }
    Ok(span.div_ceil(2))
}

fn bias_map<T: Scalar>(tape: &mut Tape<T>, table: Var, g: usize) -> Result<Var> {
    let d = tape.dims(table);
    if d.h != 1 {
        return Err(shape_err!("bias table {d} must be 1 row per head"));
    }
    let tg = table_grid(d.w)?;
    if tg < g {
        return Err(shape_err!("bias table for grid {tg} cannot serve grid {g}"));
    }
    let index = relative_position_index(g, tg);
    tape.gather_table(table, &index, g * g, g * g)
}

/// `heads×g²×g²` bias from a `1×heads×1×(2g−1)²` table.
pub fn relative_position_bias<T: Scalar>(g: usize, table: &Tensor4<T>) -> Result<Tensor4<T>> {
    let span = 2 * g - 1;
    let d = table.dims();
    if d.h != 1 || d.w != span * span {
        return Err(shape_err!("bias table {d} does not match grid {g}"));
    }
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let b = bias_map(&mut tape, t, g)?;
    Ok(tape.value(b).clone())
}

struct Parts {
    out: Var,
    q: Var,
    k: Var,
    v: Var,
    attn: Var,
}

fn ggsa_parts<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    s: &Scope,
    heads: usize,
    layout: GridLayout,
) -> Result<Parts> {
    let dims = tape.dims(x);
    layout.validate(dims)?;
    let g = layout.grid;
    let c = dims.c;
    let hd = head_dim(c, heads)?;
    let y = nn::pointwise(tape, x, s, "qkv_pw")?;
    if tape.dims(y).c != 3 * c {
        return Err(shape_err!("ggsa qkv projection gives {} for input {dims}", tape.dims(y)));
    }
    let mut parts = [x; 3];
    for (i, slot) in parts.iter_mut().enumerate() {
        let t = tape.slice_channels(y, i * c, c)?;
        let t = tape.grid_partition(t, g)?;
        let b = tape.dims(t).n;
        *slot = tape.reshape(t, Dims::new(b, heads, hd, g * g))?;
    }
    let [q, k, v] = parts;
    let qt = tape.transpose_last(q)?;
    let logits = tape.matmul(qt, k)?;
    let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt())?;
    let bias = bias_map(tape, s.var("bias_table")?, g)?;
    let logits = tape.add(logits, bias)?;
    let attn = tape.softmax_lastdim(logits)?;
    let vt = tape.transpose_last(v)?;
    let o = tape.matmul(attn, vt)?;
    let o = tape.transpose_last(o)?;
    let b = tape.dims(o).n;
    let o = tape.reshape(o, Dims::new(b, c, g, g))?;
    let o = tape.grid_reverse(o, g, dims)?;
    let out = nn::pointwise(tape, o, s, "out_pw")?;
    Ok(Parts { out, q, k, v, attn })
}

/// GGSA on the tape: spatial attention among the g² pixels that share a
/// position within their cubby, plus relative position bias.
pub fn ggsa<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, heads: usize, layout: GridLayout) -> Result<Var> {
    Ok(ggsa_parts(tape, x, s, heads, layout)?.out)
}

fn bind_params<T: Scalar>(p: &GgsaParams, tape: &mut Tape<T>) -> Result<crate::params::Bound> {
    let mut store = ParamStore::default();
    p.to_store(&mut store, "")?;
    Ok(store.bind(tape, false))
}

pub fn ggsa_forward<T: Scalar>(x: &Tensor4<T>, p: &GgsaParams, layout: GridLayout) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let bound = bind_params(p, &mut tape)?;
    let xv = tape.constant(x.clone());
    let y = ggsa(&mut tape, xv, &bound.scope(""), p.heads, layout)?;
    Ok(tape.value(y).clone())
}

pub fn ggsa_workspace<T: Scalar>(
    x: &Tensor4<T>,
    p: &GgsaParams,
    layout: GridLayout,
) -> Result<AttentionWorkspace<T>> {
    let mut tape = Tape::new();
    let bound = bind_params(p, &mut tape)?;
    let xv = tape.constant(x.clone());
    let parts = ggsa_parts(&mut tape, xv, &bound.scope(""), p.heads, layout)?;
    Ok(AttentionWorkspace {
        q: tape.value(parts.q).clone(),
        k: tape.value(parts.k).clone(),
        v: tape.value(parts.v).clone(),
        attn: tape.value(parts.attn).clone(),
    })
}
