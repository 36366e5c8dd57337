use rand::Rng;

use super::{head_dim, AlphaMode, AttentionWorkspace};
use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn;
use crate::ops::Axis;
use crate::params::{join, ParamStore, Scope};
use crate::partition::WindowLayout;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Tensors of one FCSA layer. Spatial maps are stored at the configured
/// window size and cropped top-left when a smaller window is in use.
#[derive(Clone, Debug, PartialEq)]
pub struct FcsaParams {
    pub heads: usize,
    pub qkv_pw_weight: Tensor4,
    pub qkv_pw_bias: Tensor4,
    pub qkv_dw_weight: Tensor4,
    pub qkv_dw_bias: Tensor4,
    /// `1×heads×p×p`
    pub w_t: Tensor4,
    /// `1×heads×1×1` (or `1×1×1×1` in global mode)
    pub log_alpha: Tensor4,
    pub w_top: Tensor4,
    pub w_bottom: Tensor4,
    pub out_pw_weight: Tensor4,
    pub out_pw_bias: Tensor4,
}

const NAMES: [&str; 10] = [
    "qkv_pw.weight",
    "qkv_pw.bias",
    "qkv_dw.weight",
    "qkv_dw.bias",
    "w_t",
    "log_alpha",
    "w_top",
    "w_bottom",
    "out_pw.weight",
    "out_pw.bias",
];

impl FcsaParams {
    pub fn random<R: Rng + ?Sized>(
        c: usize,
        heads: usize,
        window: usize,
        alpha: AlphaMode,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::default();
        init_fcsa(&mut store, "", c, heads, window, alpha, rng)?;
        Self::from_store(&store, "", heads)
    }

    pub fn from_store(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let g = |n: &str| store.get(&join(prefix, n)).cloned();
        Ok(Self {
            heads,
            qkv_pw_weight: g(NAMES[0])?,
            qkv_pw_bias: g(NAMES[1])?,
            qkv_dw_weight: g(NAMES[2])?,
            qkv_dw_bias: g(NAMES[3])?,
            w_t: g(NAMES[4])?,
            log_alpha: g(NAMES[5])?,
            w_top: g(NAMES[6])?,
            w_bottom: g(NAMES[7])?,
            out_pw_weight: g(NAMES[8])?,
            out_pw_bias: g(NAMES[9])?,
        })
    }

    pub fn to_store(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let ts = [
            &self.qkv_pw_weight,
            &self.qkv_pw_bias,
            &self.qkv_dw_weight,
            &self.qkv_dw_bias,
            &self.w_t,
            &self.log_alpha,
            &self.w_top,
            &self.w_bottom,
            &self.out_pw_weight,
            &self.out_pw_bias,
        ];
        for (n, t) in NAMES.iter().zip(ts) {
            store.insert(join(prefix, n), t.clone())?;
        }
        Ok(())
    }
}

/// Adds a freshly initialized FCSA layer under `prefix`.
pub fn init_fcsa<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    heads: usize,
    window: usize,
    alpha: AlphaMode,
    rng: &mut R,
) -> Result<()> {
    head_dim(c, heads)?;
    let map = Dims::new(1, heads, window, window);
    nn::init_pointwise(store, &join(prefix, "qkv_pw"), c, 3 * c, rng)?;
    nn::init_depthwise(store, &join(prefix, "qkv_dw"), 3 * c, 3, rng)?;
    store.insert(join(prefix, "w_t"), Tensor4::ones(map))?;
    store.insert(
        join(prefix, "log_alpha"),
        Tensor4::zeros(Dims::new(1, alpha.count(heads), 1, 1)),
    )?;
    store.insert(join(prefix, "w_top"), Tensor4::full(map, 0.5))?;
    store.insert(join(prefix, "w_bottom"), Tensor4::full(map, 0.5))?;
    nn::init_pointwise(store, &join(prefix, "out_pw"), c, c, rng)
}

/// Shared projection: pointwise to 3c, depthwise 3×3, split into Q, K, V.
pub fn fcsa_qkv_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope) -> Result<[Var; 3]> {
    let c = tape.dims(x).c;
    let y = nn::pointwise(tape, x, s, "qkv_pw")?;
    if tape.dims(y).c != 3 * c {
        return Err(shape_err!("fcsa qkv projection gives {} for input {}", tape.dims(y), tape.dims(x)));
    }
    let y = nn::depthwise(tape, y, s, "qkv_dw")?;
    Ok([
        tape.slice_channels(y, 0, c)?,
        tape.slice_channels(y, c, c)?,
        tape.slice_channels(y, 2 * c, c)?,
    ])
}

/// Crops a `1×heads×P×P` map to `p×p` and flattens it to `1×heads×1×p²`.
fn token_map<T: Scalar>(tape: &mut Tape<T>, map: Var, p: usize) -> Result<Var> {
    let d = tape.dims(map);
    if d.h < p || d.w < p {
        return Err(config_err!("window {p} exceeds stored map {d}"));
    }
    let m = if d.h == p && d.w == p { map } else { tape.crop(map, p, p)? };
    tape.reshape(m, Dims::new(1, d.c, 1, p * p))
}

struct Branch {
    out: Var,
    q: Var,
    k: Var,
    v: Var,
    attn: Var,
}

/// Channel attention inside `B×c×p×p` windows. `w_t` is `1×heads×1×p²`,
/// `inv_alpha` broadcasts over `B×heads×d×d`. Output is `B×heads×d×p²`.
fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    [qw, kw, vw]: [Var; 3],
    w_t: Var,
    inv_alpha: Var,
    heads: usize,
) -> Result<Branch> {
    let d = tape.dims(qw);
    let hd = head_dim(d.c, heads)?;
    let shape = Dims::new(d.n, heads, hd, d.h * d.w);
    let q = tape.reshape(qw, shape)?;
    let k = tape.reshape(kw, shape)?;
    let v = tape.reshape(vw, shape)?;
    let qt = tape.mul(q, w_t)?;
    let kt = tape.mul(k, w_t)?;
    let qn = tape.l2_normalize(qt, Axis::W)?;
    let kn = tape.l2_normalize(kt, Axis::W)?;
    let knt = tape.transpose_last(kn)?;
    let logits = tape.matmul(qn, knt)?;
    let logits = tape.mul(logits, inv_alpha)?;
    let attn = tape.softmax_lastdim(logits)?;
    let out = tape.matmul(attn, v)?;
    Ok(Branch { out, q: qn, k: kn, v, attn })
}

fn fcsa_branches<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    s: &Scope,
    heads: usize,
    layout: WindowLayout,
) -> Result<(Var, [Branch; 2])> {
    let dims = tape.dims(x);
    layout.validate(dims)?;
    let p = layout.window;
    let qkv = fcsa_qkv_tape(tape, x, s)?;
    let w_t = token_map(tape, s.var("w_t")?, p)?;
    let neg = tape.scale(s.var("log_alpha")?, -1.0)?;
    let inv_alpha = tape.exp(neg)?;

    let run = |tape: &mut Tape<T>, shift: usize, merge: &str| -> Result<(Var, Branch)> {
        let mut wins = [qkv[0]; 3];
        for (slot, &t) in wins.iter_mut().zip(&qkv) {
            let t = if shift > 0 { tape.cyclic_shift(t, shift as isize)? } else { t };
            *slot = tape.window_partition(t, p)?;
        }
        let br = window_attention(tape, wins, w_t, inv_alpha, heads)?;
        let m = token_map(tape, s.var(merge)?, p)?;
        let y = tape.mul(br.out, m)?;
        let b = tape.dims(y).n;
        let y = tape.reshape(y, Dims::new(b, dims.c, p, p))?;
        let y = tape.window_reverse(y, p, dims)?;
        let y = if shift > 0 { tape.cyclic_shift(y, -(shift as isize))? } else { y };
        Ok((y, br))
    };
    let (top, top_ws) = run(tape, 0, "w_top")?;
    let (bottom, bottom_ws) = run(tape, layout.shift, "w_bottom")?;
    let merged = tape.add(top, bottom)?;
    let out = nn::pointwise(tape, merged, s, "out_pw")?;
    Ok((out, [top_ws, bottom_ws]))
}

/// FCSA on the tape: unshifted and shifted window branches merged by
/// `w_top`/`w_bottom`, then the output projection.
pub fn fcsa<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    s: &Scope,
    heads: usize,
    layout: WindowLayout,
) -> Result<Var> {
    Ok(fcsa_branches(tape, x, s, heads, layout)?.0)
}

fn bind_params<T: Scalar>(p: &FcsaParams, tape: &mut Tape<T>) -> Result<crate::params::Bound> {
    let mut store = ParamStore::default();
    p.to_store(&mut store, "")?;
    Ok(store.bind(tape, false))
}

pub fn fcsa_forward<T: Scalar>(x: &Tensor4<T>, p: &FcsaParams, layout: WindowLayout) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let bound = bind_params(p, &mut tape)?;
    let xv = tape.constant(x.clone());
    let y = fcsa(&mut tape, xv, &bound.scope(""), p.heads, layout)?;
    Ok(tape.value(y).clone())
}

/// Intermediates of the top and bottom branches.
pub fn fcsa_workspace<T: Scalar>(
    x: &Tensor4<T>,
    p: &FcsaParams,
    layout: WindowLayout,
) -> Result<[AttentionWorkspace<T>; 2]> {
    let mut tape = Tape::new();
    let bound = bind_params(p, &mut tape)?;
    let xv = tape.constant(x.clone());
    let (_, brs) = fcsa_branches(&mut tape, xv, &bound.scope(""), p.heads, layout)?;
    Ok(brs.map(|b| AttentionWorkspace {
        q: tape.value(b.q).clone(),
        k: tape.value(b.k).clone(),
        v: tape.value(b.v).clone(),
        attn: tape.value(b.attn).clone(),
    }))
}

pub fn fcsa_qkv<T: Scalar>(x: &Tensor4<T>, p: &FcsaParams) -> Result<[Tensor4<T>; 3]> {
    let mut tape = Tape::new();
    let bound = bind_params(p, &mut tape)?;
    let xv = tape.constant(x.clone());
    let qkv = fcsa_qkv_tape(&mut tape, xv, &bound.scope(""))?;
    Ok(qkv.map(|v| tape.value(v).clone()))
}

/// Channel attention over `B×c×p×p` window tensors. `w_t` is
/// `1×heads×p×p`; `alpha` holds one positive temperature per head, or one
/// shared value.
pub fn channel_attention_window<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    w_t: &Tensor4<T>,
    alpha: &[f64],
) -> Result<Tensor4<T>> {
    let d = q.dims();
    if k.dims() != d || v.dims() != d || d.h != d.w {
        return Err(shape_err!("window attention operands {d}, {}, {}", k.dims(), v.dims()));
    }
    let heads = w_t.dims().c;
    if alpha.len() != heads && alpha.len() != 1 {
        return Err(shape_err!("{} temperatures for {heads} heads", alpha.len()));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(config_err!("temperatures must be positive"));
    }
    let mut tape = Tape::new();
    let vars = [q, k, v].map(|t| tape.constant(t.clone()));
    let wt = tape.constant(w_t.clone());
    let wt = token_map(&mut tape, wt, d.h)?;
    let inv: Vec<f64> = alpha.iter().map(|a| 1.0 / a).collect();
    let inv = tape.constant(Tensor4::from_f64s(Dims::new(1, inv.len(), 1, 1), &inv)?);
    let br = window_attention(&mut tape, vars, wt, inv, heads)?;
    Ok(tape.value(br.out).clone().reshape(d)?)
}
