//! Locally-enhanced feed-forward network (pointwise → GELU → depthwise →
//! pointwise), its over-parameterized training form, and the exact fuser
//! between them.
//!
//! Store layout under an FFN prefix `P`:
//! - training form: `P.rep.{pw1a,pw1b,dw5,dw3,dw1,pw2a,pw2b}.{weight,bias}`
//! - fused form: `P.leffn.{pw1,dw,pw2}.{weight,bias}`

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn;
use crate::ops;
use crate::params::{join, ParamStore, Scope};
use crate::tensor::{Dims, Scalar, Tensor4};

pub const REP: &str = "rep";
pub const LEFFN: &str = "leffn";
pub const FUSED_KERNEL: usize = 5;

/// Hidden width for expansion `e`: `max(c, ⌊e·c⌋)`.
pub fn hidden_width(c: usize, e: f64) -> usize {
    ((e * c as f64 + 1e-9).floor() as usize).max(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor4,
    pub bias: Tensor4,
}

impl Conv {
    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&join(name, "weight"))?.clone(),
            bias: store.get(&join(name, "bias"))?.clone(),
        })
    }

    fn save(&self, store: &mut ParamStore, name: &str) -> Result<()> {
        store.insert(join(name, "weight"), self.weight.clone())?;
        store.insert(join(name, "bias"), self.bias.clone())
    }

    fn random_pw<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let mut s = ParamStore::default();
        nn::init_pointwise(&mut s, "x", c_in, c_out, rng).expect("fresh store");
        Self::load(&s, "x").expect("just inserted")
    }

    fn random_dw<R: Rng + ?Sized>(c: usize, k: usize, rng: &mut R) -> Self {
        let mut s = ParamStore::default();
        nn::init_depthwise(&mut s, "x", c, k, rng).expect("fresh store");
        Self::load(&s, "x").expect("just inserted")
    }

    pub fn num_elements(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Inference form.
#[derive(Clone, Debug, PartialEq)]
pub struct LeffnParams {
    pub pw1: Conv,
    pub dw: Conv,
    pub pw2: Conv,
}

/// Training form: sequential pointwise pairs and parallel depthwise
/// branches (5×5, 3×3, 1×1 and identity).
#[derive(Clone, Debug, PartialEq)]
pub struct RepLeffnParams {
    pub pw1a: Conv,
    pub pw1b: Conv,
    pub dw5: Conv,
    pub dw3: Conv,
    pub dw1: Conv,
    pub pw2a: Conv,
    pub pw2b: Conv,
}

const REP_LAYERS: [&str; 7] = ["pw1a", "pw1b", "dw5", "dw3", "dw1", "pw2a", "pw2b"];
const LEFFN_LAYERS: [&str; 3] = ["pw1", "dw", "pw2"];

impl LeffnParams {
    pub fn random<R: Rng + ?Sized>(c: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        Self {
            pw1: Conv::random_pw(c, hidden, rng),
            dw: Conv::random_dw(hidden, k, rng),
            pw2: Conv::random_pw(hidden, c, rng),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let l = |n: &str| Conv::load(store, &join(prefix, n));
        Ok(Self {
            pw1: l("pw1")?,
            dw: l("dw")?,
            pw2: l("pw2")?,
        })
    }

    pub fn to_store(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (n, c) in LEFFN_LAYERS.iter().zip([&self.pw1, &self.dw, &self.pw2]) {
            c.save(store, &join(prefix, n))?;
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        [&self.pw1, &self.dw, &self.pw2].iter().map(|c| c.num_elements()).sum()
    }
}

impl RepLeffnParams {
    pub fn random<R: Rng + ?Sized>(c: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            pw1a: Conv::random_pw(c, hidden, rng),
            pw1b: Conv::random_pw(hidden, hidden, rng),
            dw5: Conv::random_dw(hidden, 5, rng),
            dw3: Conv::random_dw(hidden, 3, rng),
            dw1: Conv::random_dw(hidden, 1, rng),
            pw2a: Conv::random_pw(hidden, hidden, rng),
            pw2b: Conv::random_pw(hidden, c, rng),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let l = |n: &str| Conv::load(store, &join(prefix, n));
        Ok(Self {
            pw1a: l("pw1a")?,
            pw1b: l("pw1b")?,
            dw5: l("dw5")?,
            dw3: l("dw3")?,
            dw1: l("dw1")?,
            pw2a: l("pw2a")?,
            pw2b: l("pw2b")?,
        })
    }

    pub fn to_store(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (n, c) in REP_LAYERS.iter().zip(self.layers()) {
            c.save(store, &join(prefix, n))?;
        }
        Ok(())
    }

    fn layers(&self) -> [&Conv; 7] {
        [
            &self.pw1a, &self.pw1b, &self.dw5, &self.dw3, &self.dw1, &self.pw2a, &self.pw2b,
        ]
    }

    pub fn num_elements(&self) -> usize {
        self.layers().iter().map(|c| c.num_elements()).sum()
    }
}

/// Adds a training-form FFN under `prefix` (`prefix.rep.*`).
pub fn init_rep_leffn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    RepLeffnParams::random(c, hidden, rng).to_store(store, &join(prefix, REP))
}

/// FFN on the tape; picks the fused or training form from what `s` holds.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope) -> Result<Var> {
    if s.has(&join(LEFFN, "pw1.weight")) {
        leffn_tape(tape, x, &s.child(LEFFN))
    } else {
        rep_leffn_tape(tape, x, &s.child(REP))
    }
}

fn leffn_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope) -> Result<Var> {
    let h = nn::pointwise(tape, x, s, "pw1")?;
    let h = tape.gelu(h)?;
    let h = nn::depthwise(tape, h, s, "dw")?;
    nn::pointwise(tape, h, s, "pw2")
}

fn rep_leffn_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope) -> Result<Var> {
    let h = nn::pointwise(tape, x, s, "pw1a")?;
    let h = nn::pointwise(tape, h, s, "pw1b")?;
    let h = tape.gelu(h)?;
    let mut sum = h;
    for name in ["dw5", "dw3", "dw1"] {
        let b = nn::depthwise(tape, h, s, name)?;
        sum = tape.add(sum, b)?;
    }
    let h = nn::pointwise(tape, sum, s, "pw2a")?;
    nn::pointwise(tape, h, s, "pw2b")
}

fn eval<T: Scalar>(
    x: &Tensor4<T>,
    save: impl FnOnce(&mut ParamStore) -> Result<()>,
    run: impl FnOnce(&mut Tape<T>, Var, &Scope) -> Result<Var>,
) -> Result<Tensor4<T>> {
    let mut store = ParamStore::default();
    save(&mut store)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = run(&mut tape, xv, &bound.scope(""))?;
    Ok(tape.value(y).clone())
}

pub fn leffn_forward<T: Scalar>(x: &Tensor4<T>, p: &LeffnParams) -> Result<Tensor4<T>> {
    eval(x, |s| p.to_store(s, ""), leffn_tape)
}

pub fn rep_leffn_forward<T: Scalar>(x: &Tensor4<T>, p: &RepLeffnParams) -> Result<Tensor4<T>> {
    eval(x, |s| p.to_store(s, ""), rep_leffn_tape)
}

fn weight_matrix(w: &Tensor4, what: &str) -> Result<(usize, usize)> {
    let d = w.dims();
    if d.h != 1 || d.w != 1 {
        return Err(shape_err!("{what}: {d} is not a pointwise kernel"));
    }
    Ok((d.n, d.c))
}

/// Collapses `pw2(pw1(x))` into one pointwise conv:
/// `w = w2·w1`, `b = w2·b1 + b2`.
pub fn fuse_sequential_pw(first: &Conv, second: &Conv) -> Result<Conv> {
    let (m, c) = weight_matrix(&first.weight, "fuse_sequential_pw")?;
    let (o, m2) = weight_matrix(&second.weight, "fuse_sequential_pw")?;
    if m != m2 || first.bias.len() != m || second.bias.len() != o {
        return Err(shape_err!(
            "fuse_sequential_pw: {} then {} do not chain",
            first.weight.dims(),
            second.weight.dims()
        ));
    }
    let (w1, w2) = (first.weight.data(), second.weight.data());
    let mut w = vec![0.0; o * c];
    let mut b = second.bias.data().to_vec();
    for r in 0..o {
        for k in 0..m {
            let a = w2[r * m + k];
            for j in 0..c {
                w[r * c + j] += a * w1[k * c + j];
            }
            b[r] += a * first.bias.data()[k];
        }
    }
    Ok(Conv {
        weight: Tensor4::from_vec(Dims::new(o, c, 1, 1), w)?,
        bias: Tensor4::from_vec(nn::vector(o), b)?,
    })
}

/// Sums the 5×5, 3×3, 1×1 and identity branches into one 5×5 kernel.
pub fn fuse_parallel_dw(dw5: &Conv, dw3: &Conv, dw1: &Conv) -> Result<Conv> {
    let c = dw5.weight.dims().n;
    let expect = [(dw5, 5usize), (dw3, 3), (dw1, 1)];
    for (conv, k) in expect {
        if conv.weight.dims() != Dims::new(c, 1, k, k) || conv.bias.len() != c {
            return Err(shape_err!(
                "fuse_parallel_dw: expected {c}×1×{k}×{k} branch, got {}",
                conv.weight.dims()
            ));
        }
    }
    let mut w = Tensor4::zeros(Dims::new(c, 1, 5, 5));
    let mut b = Tensor4::zeros(nn::vector(c));
    for ch in 0..c {
        let dst = &mut w.data_mut()[ch * 25..(ch + 1) * 25];
        for (conv, k) in expect {
            let off = (5 - k) / 2;
            let src = &conv.weight.data()[ch * k * k..(ch + 1) * k * k];
            for y in 0..k {
                for x in 0..k {
                    dst[(y + off) * 5 + x + off] += src[y * k + x];
                }
            }
        }
        dst[12] += 1.0;
        b.data_mut()[ch] = dw5.bias.data()[ch] + dw3.bias.data()[ch] + dw1.bias.data()[ch];
    }
    Ok(Conv { weight: w, bias: b })
}

pub fn fuse_rep_leffn(p: &RepLeffnParams) -> Result<LeffnParams> {
    Ok(LeffnParams {
        pw1: fuse_sequential_pw(&p.pw1a, &p.pw1b)?,
        dw: fuse_parallel_dw(&p.dw5, &p.dw3, &p.dw1)?,
        pw2: fuse_sequential_pw(&p.pw2a, &p.pw2b)?,
    })
}

/// Replaces every `P.rep.*` group with its fused `P.leffn.*` equivalent,
/// keeping all other entries and the overall order.
pub fn fuse_store(store: &ParamStore) -> Result<ParamStore> {
    let suffix = format!(".{REP}.pw1a.weight");
    let mut out = ParamStore::new(store.dtype());
    let mut fused_prefixes: Vec<String> = Vec::new();
    for (name, t) in store.iter() {
        if let Some(p) = name.strip_suffix(&suffix) {
            let rep = RepLeffnParams::from_store(store, &join(p, REP))?;
            fuse_rep_leffn(&rep)?.to_store(&mut out, &join(p, LEFFN))?;
            fused_prefixes.push(format!("{p}.{REP}."));
            continue;
        }
        if fused_prefixes.iter().any(|fp| name.starts_with(fp.as_str())) {
            continue;
        }
        if name.contains(&format!(".{REP}.")) {
            return Err(config_err!("`{name}` appears before its group's pw1a weight"));
        }
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

/// True when no training-form FFN remains in `store`.
pub fn is_fused(store: &ParamStore) -> bool {
    !store.names().any(|n| n.contains(&format!(".{REP}.")))
}

/// Reference evaluation of a depthwise branch sum, used by tests and the
/// self-check.
pub fn parallel_dw_reference<T: Scalar>(x: &Tensor4<T>, p: &RepLeffnParams) -> Result<Tensor4<T>> {
    let mut acc = x.clone();
    for conv in [&p.dw5, &p.dw3, &p.dw1] {
        let y = ops::conv_depthwise(x, &conv.weight.cast(), Some(&conv.bias.cast()))?;
        acc.add_assign(&y);
    }
    Ok(acc)
}
