//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! activations its backward rule needs. [`Tape::backward`] then replays the
//! record in reverse, visiting each node once, and leaves a gradient for
//! every leaf that requires one.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeometry};
use crate::ops::loss::{self, CeSaved};
use crate::ops::norm::{self, BatchNormStats, BnSaved};
use crate::ops::resample;
use crate::scalar::Scalar;
use crate::tensor::{outer_inner, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    AvgPool,
    BilinearUpsample,
}

/// Deliberate backward-rule corruptions, used to show that gradient
/// checking catches a broken rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    NegateTanhBackward,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Unary { input: Var, kind: Unary },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { input: Var, factor: T },
    Sum { input: Var },
    AvgPool { input: Var },
    Upsample { input: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SelectBatch { input: Var, indices: Vec<usize> },
    RepeatBatch { input: Var, times: usize },
    Reshape { input: Var },
    SoftmaxCe { logits: Var, labels: Vec<u8>, ignore: Option<u8>, saved: CeSaved<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Unary { kind: Unary::Sigmoid, .. } => "sigmoid",
            Op::Unary { kind: Unary::Tanh, .. } => "tanh",
            Op::Unary { kind: Unary::Relu, .. } => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectBatch { .. } => "select_batch",
            Op::RepeatBatch { .. } => "repeat_batch",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxCe { .. } => "softmax_ce_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    grads: Option<Vec<Option<Tensor<T>>>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            grads: None,
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self { fault, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(node))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named parameter once per tape; later calls with the same
    /// name return the same leaf, so gradients from every use are summed.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    // ---- operations ------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = conv::conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(out, Op::Conv2d { input, kernel, bias, geom }, &inputs)
    }

    /// Batch normalization. In train mode the batch statistics are used and
    /// `stats` receives a momentum update; in eval mode `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        let (out, saved) = match mode {
            Mode::Train => norm::forward_train(x, g, b, stats)?,
            Mode::Eval => norm::forward_eval(x, g, b, stats)?,
        };
        self.push(out, Op::BatchNorm { input, gamma, beta, saved }, &[input, gamma, beta])
    }

    pub fn pointwise(&mut self, input: Var, kind: Pointwise, other: Option<Var>) -> Result<Var> {
        let binary = matches!(kind, Pointwise::Add | Pointwise::Hadamard);
        match (binary, other) {
            (true, None) => return Err(Error::invalid(format!("{kind:?} needs a second operand"))),
            (false, Some(_)) => return Err(Error::invalid(format!("{kind:?} takes one operand"))),
            _ => {}
        }
        match kind {
            Pointwise::Sigmoid => self.unary(input, Unary::Sigmoid),
            Pointwise::Tanh => self.unary(input, Unary::Tanh),
            Pointwise::Relu => self.unary(input, Unary::Relu),
            Pointwise::Add => self.add(input, other.expect("checked")),
            Pointwise::Hadamard => self.mul(input, other.expect("checked")),
        }
    }

    fn unary(&mut self, input: Var, kind: Unary) -> Result<Var> {
        let f = match kind {
            Unary::Sigmoid => |v: T| T::one() / (T::one() + (-v).exp()),
            Unary::Tanh => |v: T| v.tanh(),
            Unary::Relu => |v: T| v.max(T::zero()),
        };
        let out = self.value(input).map(f);
        self.push(out, Op::Unary { input, kind }, &[input])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ (no broadcasting)",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "hadamard", |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[input])
    }

    fn planes(&self, input: Var, what: &str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let x = self.value(input);
        x.expect_rank(4, what)?;
        Ok((x.dim(0) * x.dim(1), x.dim(2), x.dim(3), x.shape().to_vec()))
    }

    /// Adaptive average pooling to `out_h x out_w` windows.
    pub fn avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (planes, h, w, shape) = self.planes(input, "avg_pool")?;
        resample::check_pool(h, w, out_h, out_w)?;
        let data = resample::avg_pool(self.value(input).data(), planes, h, w, out_h, out_w);
        let out = Tensor::new(vec![shape[0], shape[1], out_h, out_w], data)?;
        self.push(out, Op::AvgPool { input }, &[input])
    }

    /// Bilinear resize with half-pixel centers (align-corners = false).
    pub fn upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (planes, h, w, shape) = self.planes(input, "bilinear_upsample")?;
        resample::check_resize(out_h, out_w)?;
        let data = resample::bilinear(self.value(input).data(), planes, h, w, out_h, out_w);
        let out = Tensor::new(vec![shape[0], shape[1], out_h, out_w], data)?;
        self.push(out, Op::Upsample { input }, &[input])
    }

    pub fn pool_and_resize(&mut self, input: Var, kind: Resize, out_h: usize, out_w: usize) -> Result<Var> {
        match kind {
            Resize::AvgPool => self.avg_pool(input, out_h, out_w),
            Resize::BilinearUpsample => self.upsample(input, out_h, out_w),
        }
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let chunk = x.dim(axis) * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() || len == 0 || start + len > x.dim(axis) {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, inner) = outer_inner(x.shape(), axis);
        let span = x.dim(axis) * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * span + start * inner..o * span + (start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { input, axis, start }, &[input])
    }

    /// Picks entries of the leading axis by index (repeats allowed).
    pub fn select_batch(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if indices.is_empty() {
            return Err(Error::invalid("select_batch with no indices"));
        }
        let item = x.numel() / x.dim(0);
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            if i >= x.dim(0) {
                return Err(Error::invalid(format!("select_batch index {i} >= {}", x.dim(0))));
            }
            data.extend_from_slice(&x.data()[i * item..(i + 1) * item]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::SelectBatch { input, indices: indices.to_vec() }, &[input])
    }

    /// Stacks `times` copies along a new leading axis.
    pub fn repeat_batch(&mut self, input: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::invalid("repeat_batch times must be positive"));
        }
        let x = self.value(input);
        let mut shape = vec![times];
        shape.extend_from_slice(x.shape());
        let data = x.data().repeat(times);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::RepeatBatch { input, times }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { input }, &[input])
    }

    /// Mean pixelwise cross-entropy; `labels` is `[N,H,W]` row-major.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: &[u8], ignore: Option<u8>) -> Result<Var> {
        let (value, saved) = loss::forward(self.value(logits), labels, ignore)?;
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), ignore, saved };
        self.push(Tensor::scalar(value), op, &[logits])
    }

    // ---- backward --------------------------------------------------------

    /// Propagates d(loss)/d(leaf) for every leaf that requires a gradient.
    ///
    /// Uses of the same leaf are summed. Calling this twice without
    /// [`reset_grads`](Self::reset_grads) in between is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Autodiff("backward already ran on this tape; reset gradients first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut out: Vec<(Var, Vec<T>)> = Vec::new();
            self.node_backward(node, &g, &mut out)?;
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (var, contribution) in out {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if contribution.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { op: node.op.name(), node: id });
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = Some(leaf_grads);
        Ok(())
    }

    fn node_backward(&self, node: &Node<T>, g: &[T], out: &mut Vec<(Var, Vec<T>)>) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let dy = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let need = (wants(*input), wants(*kernel), bias.is_some_and(wants));
                let grads = conv::conv2d_backward(self.value(*input), self.value(*kernel), &dy, *geom, need)?;
                if let Some(dx) = grads.input {
                    out.push((*input, dx.into_data()));
                }
                if let Some(dk) = grads.kernel {
                    out.push((*kernel, dk.into_data()));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db.into_data()));
                }
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (dx, dg, db) = norm::backward(node.value.shape(), self.value(*gamma), saved, g);
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Unary { input, kind } => {
                let y = node.value.data();
                let dx = match kind {
                    Unary::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                    Unary::Tanh => {
                        let sign = if self.fault == Some(Fault::NegateTanhBackward) { -T::one() } else { T::one() };
                        y.iter().zip(g).map(|(&y, &g)| sign * g * (T::one() - y * y)).collect()
                    }
                    Unary::Relu => y.iter().zip(g).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect(),
                };
                out.push((*input, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect()));
                out.push((*b, g.iter().zip(x).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale { input, factor } => out.push((*input, g.iter().map(|&v| v * *factor).collect())),
            Op::Sum { input } => out.push((*input, vec![g[0]; self.value(*input).numel()])),
            Op::AvgPool { input } | Op::Upsample { input } => {
                let s = self.value(*input).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (node.value.dim(2), node.value.dim(3));
                let dx = if matches!(node.op, Op::AvgPool { .. }) {
                    resample::avg_pool_backward(g, planes, h, w, oh, ow)
                } else {
                    resample::bilinear_backward(g, planes, h, w, oh, ow)
                };
                out.push((*input, dx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let span = node.value.dim(*axis) * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.value(*v).dim(*axis) * inner;
                    let mut dx = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        dx.extend_from_slice(&g[o * span + offset..o * span + offset + chunk]);
                    }
                    offset += chunk;
                    out.push((*v, dx));
                }
            }
            Op::Slice { input, axis, start } => {
                let x = self.value(*input);
                let (outer, inner) = outer_inner(x.shape(), *axis);
                let span = x.dim(*axis) * inner;
                let chunk = node.value.dim(*axis) * inner;
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    let dst = o * span + start * inner;
                    dx[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                }
                out.push((*input, dx));
            }
            Op::SelectBatch { input, indices } => {
                let x = self.value(*input);
                let item = x.numel() / x.dim(0);
                let mut dx = vec![T::zero(); x.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    dx[i * item..(i + 1) * item]
                        .iter_mut()
                        .zip(&g[k * item..(k + 1) * item])
                        .for_each(|(a, &b)| *a += b);
                }
                out.push((*input, dx));
            }
            Op::RepeatBatch { input, times } => {
                let item = self.value(*input).numel();
                let mut dx = vec![T::zero(); item];
                for r in 0..*times {
                    dx.iter_mut().zip(&g[r * item..(r + 1) * item]).for_each(|(a, &b)| *a += b);
                }
                out.push((*input, dx));
            }
            Op::Reshape { input } => out.push((*input, g.to_vec())),
            Op::SoftmaxCe { logits, labels, ignore, saved } => {
                let dx = loss::backward(self.value(*logits).shape(), labels, *ignore, saved, g[0]);
                out.push((*logits, dx));
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every trainable named parameter, in registration order.
    pub fn param_grads(&self) -> Result<Vec<(String, Tensor<T>)>> {
        if self.grads.is_none() {
            return Err(Error::Autodiff("no gradients: backward has not run".into()));
        }
        Ok(self
            .params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.clone(), g.clone())))
            .collect())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }
}
