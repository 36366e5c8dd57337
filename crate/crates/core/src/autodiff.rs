//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node keeps
//! its value, the ids of its inputs (always earlier nodes) and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes once in reverse
//! order and accumulates vector-Jacobian products into the leaves.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Axis, LayerNormCache};
use crate::partition;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    ConvPointwise { bias: bool },
    ConvDepthwise { bias: bool },
    Conv2d { bias: bool },
    Gelu,
    LayerNorm(LayerNormCache<T>),
    Softmax,
    L2Normalize { axis: Axis, norms: Vec<T> },
    Exp,
    Scale(T),
    Add,
    Mul,
    Matmul,
    Transpose,
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    Concat { first: usize },
    SliceChannels { start: usize, orig: Dims },
    Crop { orig: Dims },
    PadReflect { orig: Dims },
    Reshape { orig: Dims },
    Gather { index: Vec<usize>, table: Dims },
    WindowPartition { window: usize, orig: Dims },
    WindowReverse { window: usize },
    Shift(isize),
    GridPartition { grid: usize, orig: Dims },
    GridReverse { grid: usize },
    L1Loss { target: Tensor4<T> },
    MseLoss { target: Tensor4<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::ConvPointwise { .. } => "conv_pointwise",
            Op::ConvDepthwise { .. } => "conv_depthwise",
            Op::Conv2d { .. } => "conv2d",
            Op::Gelu => "gelu",
            Op::LayerNorm(_) => "layer_norm_channels",
            Op::Softmax => "softmax_lastdim",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Exp => "exp",
            Op::Scale(_) => "scale",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Matmul => "matmul_batched",
            Op::Transpose => "transpose_last",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::PixelUnshuffle(_) => "pixel_unshuffle",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Crop { .. } => "crop",
            Op::PadReflect { .. } => "pad_reflect",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather_table",
            Op::WindowPartition { .. } => "window_partition",
            Op::WindowReverse { .. } => "window_reverse",
            Op::Shift(_) => "cyclic_shift",
            Op::GridPartition { .. } => "grid_partition",
            Op::GridReverse { .. } => "grid_reverse",
            Op::L1Loss { .. } => "l1_loss",
            Op::MseLoss { .. } => "mse_loss",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor4<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a `requires_grad` leaf (zeros if it did not reach the output).
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            consumed: false,
        }
    }

    /// Tape that rejects any op producing NaN/Inf.
    pub fn debug() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input leaf; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor4<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv_pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::conv_pointwise(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let inputs = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::ConvPointwise { bias: b.is_some() }, inputs, y)
    }

    pub fn conv_depthwise(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::conv_depthwise(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        let inputs = [Some(x), Some(k), b].into_iter().flatten().collect();
        self.push(Op::ConvDepthwise { bias: b.is_some() }, inputs, y)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let inputs = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::Conv2d { bias: b.is_some() }, inputs, y)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = ops::gelu(self.value(x));
        self.push(Op::Gelu, vec![x], y)
    }

    pub fn layer_norm_channels(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            ops::layer_norm_channels(self.value(x), self.value(scale), self.value(shift), eps)?;
        self.push(Op::LayerNorm(cache), vec![x, scale, shift], y)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_lastdim(self.value(x));
        self.push(Op::Softmax, vec![x], y)
    }

    pub fn l2_normalize(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (y, norms) = ops::l2_normalize(self.value(x), axis);
        self.push(Op::L2Normalize { axis, norms }, vec![x], y)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = ops::exp(self.value(x));
        self.push(Op::Exp, vec![x], y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let y = ops::scale(self.value(x), s);
        self.push(Op::Scale(s), vec![x], y)
    }

    /// `a + b`, `b` broadcast onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        self.push(Op::Add, vec![a, b], y)
    }

    /// `a ⊙ b`, `b` broadcast onto `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        self.push(Op::Mul, vec![a, b], y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul_batched(self.value(a), self.value(b))?;
        self.push(Op::Matmul, vec![a, b], y)
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose_last(self.value(x));
        self.push(Op::Transpose, vec![x], y)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = ops::pixel_shuffle(self.value(x), r)?;
        self.push(Op::PixelShuffle(r), vec![x], y)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = ops::pixel_unshuffle(self.value(x), r)?;
        self.push(Op::PixelUnshuffle(r), vec![x], y)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let first = self.dims(a).c;
        self.push(Op::Concat { first }, vec![a, b], y)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let orig = self.dims(x);
        let y = ops::slice_channels(self.value(x), start, len)?;
        self.push(Op::SliceChannels { start, orig }, vec![x], y)
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let orig = self.dims(x);
        let y = ops::crop(self.value(x), h, w)?;
        self.push(Op::Crop { orig }, vec![x], y)
    }

    pub fn pad_reflect(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let orig = self.dims(x);
        let y = ops::pad_reflect(self.value(x), h, w)?;
        self.push(Op::PadReflect { orig }, vec![x], y)
    }

    pub fn reshape(&mut self, x: Var, dims: Dims) -> Result<Var> {
        let orig = self.dims(x);
        let y = self.value(x).clone().reshape(dims)?;
        self.push(Op::Reshape { orig }, vec![x], y)
    }

    pub fn gather_table(&mut self, table: Var, index: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let td = self.dims(table);
        let y = ops::gather_table(self.value(table), index, rows, cols)?;
        self.push(
            Op::Gather {
                index: index.to_vec(),
                table: td,
            },
            vec![table],
            y,
        )
    }

    pub fn window_partition(&mut self, x: Var, window: usize) -> Result<Var> {
        let orig = self.dims(x);
        let y = partition::window_partition(self.value(x), window)?;
        self.push(Op::WindowPartition { window, orig }, vec![x], y)
    }

    pub fn window_reverse(&mut self, x: Var, window: usize, dims: Dims) -> Result<Var> {
        let y = partition::window_reverse(self.value(x), window, dims)?;
        self.push(Op::WindowReverse { window }, vec![x], y)
    }

    pub fn cyclic_shift(&mut self, x: Var, s: isize) -> Result<Var> {
        let y = partition::cyclic_shift(self.value(x), s);
        self.push(Op::Shift(s), vec![x], y)
    }

    pub fn grid_partition(&mut self, x: Var, grid: usize) -> Result<Var> {
        let orig = self.dims(x);
        let y = partition::grid_partition(self.value(x), grid)?;
        self.push(Op::GridPartition { grid, orig }, vec![x], y)
    }

    pub fn grid_reverse(&mut self, x: Var, grid: usize, dims: Dims) -> Result<Var> {
        let y = partition::grid_reverse(self.value(x), grid, dims)?;
        self.push(Op::GridReverse { grid }, vec![x], y)
    }

    /// Mean absolute error against a fixed target; a 1×1×1×1 output.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor4<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_dims(target.dims(), "l1_loss")?;
        let n = T::from_usize(p.len().max(1));
        let s: T = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let y = Tensor4::scalar(s / n);
        self.push(
            Op::L1Loss {
                target: target.clone(),
            },
            vec![pred],
            y,
        )
    }

    /// Mean squared error against a fixed target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor4<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_dims(target.dims(), "mse_loss")?;
        let n = T::from_usize(p.len().max(1));
        let s: T = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let y = Tensor4::scalar(s / n);
        self.push(
            Op::MseLoss {
                target: target.clone(),
            },
            vec![pred],
            y,
        )
    }

    /// Back-propagates `seed` (shaped like `output`) and returns
    /// `∂⟨seed, output⟩/∂leaf` for every `requires_grad` leaf. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, output: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} is not on this tape", output.0)));
        }
        let od = self.dims(output);
        if seed.dims() != od {
            return Err(shape_err!("backward: seed {} does not match output {od}", seed.dims()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_grads = self.vjp(node, &g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !keep {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor4::zeros(node.value.dims()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of one node, one entry per input.
    fn vjp(&self, node: &Node<T>, g: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let need = |k: usize| node.inputs.get(k).is_some_and(|v| self.nodes[v.0].requires_grad);
        let single = |t: Tensor4<T>| vec![Some(t)];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::ConvPointwise { bias } => {
                let r = ops::conv_pointwise_backward(inp(0), inp(1), *bias, g, [need(0), need(1), need(2)]);
                vec![r.input, r.weight, r.bias]
            }
            Op::ConvDepthwise { bias } => {
                let r = ops::conv_depthwise_backward(inp(0), inp(1), *bias, g, [need(0), need(1), need(2)]);
                vec![r.input, r.weight, r.bias]
            }
            Op::Conv2d { bias } => {
                let r = ops::conv2d_backward(inp(0), inp(1), *bias, g, [need(0), need(1), need(2)]);
                vec![r.input, r.weight, r.bias]
            }
            Op::Gelu => single(ops::gelu_backward(inp(0), g)),
            Op::LayerNorm(cache) => {
                let (dx, ds, db) = ops::layer_norm_backward(cache, inp(1), g);
                vec![Some(dx), Some(ds), Some(db)]
            }
            Op::Softmax => single(ops::softmax_lastdim_backward(&node.value, g)),
            Op::L2Normalize { axis, norms } => {
                single(ops::l2_normalize_backward(&node.value, norms, *axis, g))
            }
            Op::Exp => single(g.zip_map(&node.value, |a, b| a * b)?),
            Op::Scale(s) => single(ops::scale(g, *s)),
            Op::Add => vec![
                Some(g.clone()),
                need(1).then(|| ops::broadcast_reduce(g, inp(1).dims())),
            ],
            Op::Mul => {
                let (da, db) = ops::mul_backward(inp(0), inp(1), g, [need(0), need(1)]);
                vec![da, db]
            }
            Op::Matmul => {
                let (da, db) = ops::matmul_backward(inp(0), inp(1), g, [need(0), need(1)]);
                vec![da, db]
            }
            Op::Transpose => single(ops::transpose_last(g)),
            Op::PixelShuffle(r) => single(ops::pixel_unshuffle(g, *r)?),
            Op::PixelUnshuffle(r) => single(ops::pixel_shuffle(g, *r)?),
            Op::Concat { first } => {
                let mut parts = ops::split_channels(g, &[*first, g.dims().c - first])?;
                let b = parts.pop();
                vec![parts.pop(), b]
            }
            Op::SliceChannels { start, orig } => single(ops::slice_channels_backward(g, *start, *orig)),
            Op::Crop { orig } => single(ops::pad_crop_backward(g, *orig)),
            Op::PadReflect { orig } => single(ops::pad_reflect_backward(g, *orig)),
            Op::Reshape { orig } => single(g.clone().reshape(*orig)?),
            Op::Gather { index, table } => single(ops::gather_table_backward(g, index, *table)),
            Op::WindowPartition { window, orig } => {
                single(partition::window_reverse(g, *window, *orig)?)
            }
            Op::WindowReverse { window } => single(partition::window_partition(g, *window)?),
            Op::Shift(s) => single(partition::cyclic_shift(g, -s)),
            Op::GridPartition { grid, orig } => single(partition::grid_reverse(g, *grid, *orig)?),
            Op::GridReverse { grid } => single(partition::grid_partition(g, *grid)?),
            Op::L1Loss { target } => {
                let p = inp(0);
                let k = g.data()[0] / T::from_usize(p.len().max(1));
                single(p.zip_map(target, |a, b| {
                    let d = a - b;
                    if d > T::zero() {
                        k
                    } else if d < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                })?)
            }
            Op::MseLoss { target } => {
                let p = inp(0);
                let k = T::from_f64(2.0) * g.data()[0] / T::from_usize(p.len().max(1));
                single(p.zip_map(target, |a, b| k * (a - b))?)
            }
        };
        Ok(out)
    }
}
