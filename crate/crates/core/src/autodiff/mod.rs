//! Dynamic-tape reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every training step. Each recorded node owns
//! its forward value; [`Graph::backward`] walks the tape once in reverse
//! insertion order, which is a valid reverse topological order because every
//! node's inputs are recorded before it.

mod gradcheck;
pub mod kernels;
mod optim;

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::ConvGeom;
pub use optim::{Adam, AdamState};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries for inputs
/// that do not may be `None`.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

/// Primitive kinds addressable by name through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Conv2d,
    ConvTranspose2d,
    Relu,
    Exp,
    SoftmaxPixels,
    Sum,
    Mean,
    ConcatChannels,
    Upsample2x,
    AvgPool2x,
    L2NormalizeChannels,
    BatchNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::SoftmaxPixels,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::ConcatChannels,
        OpKind::Upsample2x,
        OpKind::AvgPool2x,
        OpKind::L2NormalizeChannels,
        OpKind::BatchNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "transposed-conv2d",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::SoftmaxPixels => "softmax-over-pixels",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatChannels => "concat-channels",
            OpKind::Upsample2x => "upsample-bilinear-2x",
            OpKind::AvgPool2x => "avgpool-2x",
            OpKind::L2NormalizeChannels => "l2-normalize-channels",
            OpKind::BatchNorm => "batchnorm",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Extra arguments for [`Graph::apply`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub stride: usize,
    pub pad: usize,
    /// Constant factor for `scalar-mul` with a single input.
    pub factor: Option<f64>,
    pub batchnorm: Option<BatchNormMode>,
}

pub const BN_EPS: f64 = 1e-5;

/// Statistics a batchnorm node normalizes with.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics of a training-mode batchnorm forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running-average updates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul { s: Var, x: Var },
    Scale { x: Var, factor: f64 },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, co: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, out_geom: ConvGeom, ci: usize },
    Relu(Var),
    Exp(Var),
    SoftmaxPixels(Var),
    Sum(Var),
    Mean(Var),
    ConcatChannels(Vec<Var>),
    Upsample2x(Var),
    AvgPool2x(Var),
    L2NormalizeChannels { x: Var, norms: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul { s, x } => vec![*s, *x],
            Op::Scale { x, .. } => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x)
            | Op::Exp(x)
            | Op::SoftmaxPixels(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Upsample2x(x)
            | Op::AvgPool2x(x) => vec![*x],
            Op::L2NormalizeChannels { x, .. } => vec![*x],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// The tape.
pub struct Graph {
    nodes: Vec<Node>,
    /// `None` unless branch tracking was requested.
    branches: Option<DefaultHasher>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter-leaf gradient into `store`.
    ///
    /// Parameters the loss does not depend on receive an explicit zero
    /// gradient when they are trainable.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (g, p) in self.grads.iter().zip(&self.params) {
            let Some(id) = p else { continue };
            match g {
                Some(g) => store.accumulate(*id, g),
                None => {
                    let zero = Tensor::zeros(store.value(*id).shape());
                    store.accumulate(*id, &zero);
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            branches: None,
        }
    }

    /// Graph that also hashes every branch decision, for finite-difference
    /// checks that must skip kinks.
    pub fn with_branch_tracking() -> Self {
        Graph {
            nodes: Vec::new(),
            branches: Some(DefaultHasher::new()),
        }
    }

    pub fn tracks_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every discrete branch decision taken so far (relu signs,
    /// argmax winners, clamp states). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    /// Always 0 without branch tracking.
    pub fn branch_signature(&self) -> u64 {
        self.branches.as_ref().map_or(0, |h| h.finish())
    }

    pub fn record_branch(&mut self, decision: impl Hash) {
        if let Some(h) = self.branches.as_mut() {
            decision.hash(h);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a constant (never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; gradient flows only if the
    /// parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
            param: p.requires_grad.then_some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Dispatches a primitive by kind.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(
                    "apply",
                    format!("{kind} takes {n} inputs, got {}", inputs.len()),
                ));
            }
            Ok(())
        };
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::ScalarMul => match attrs.factor {
                Some(f) => {
                    arity(1)?;
                    Ok(self.scale(inputs[0], f))
                }
                None => {
                    arity(2)?;
                    self.scalar_mul(inputs[0], inputs[1])
                }
            },
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Conv2d | OpKind::ConvTranspose2d => {
                if !(2..=3).contains(&inputs.len()) {
                    return Err(Error::shape("apply", format!("{kind} takes 2 or 3 inputs")));
                }
                let bias = inputs.get(2).copied();
                let stride = attrs.stride.max(1);
                if kind == OpKind::Conv2d {
                    self.conv2d(inputs[0], inputs[1], bias, stride, attrs.pad)
                } else {
                    self.conv_transpose2d(inputs[0], inputs[1], bias, stride, attrs.pad)
                }
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Exp => {
                arity(1)?;
                Ok(self.exp(inputs[0]))
            }
            OpKind::SoftmaxPixels => {
                arity(1)?;
                self.softmax_pixels(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::ConcatChannels => self.concat_channels(inputs),
            OpKind::Upsample2x => {
                arity(1)?;
                self.upsample2x(inputs[0])
            }
            OpKind::AvgPool2x => {
                arity(1)?;
                self.avgpool2x(inputs[0])
            }
            OpKind::L2NormalizeChannels => {
                arity(1)?;
                self.l2_normalize_channels(inputs[0])
            }
            OpKind::BatchNorm => {
                arity(3)?;
                let mode = attrs.batchnorm.clone().unwrap_or(BatchNormMode::Batch);
                self.batchnorm(inputs[0], inputs[1], inputs[2], &mode).map(|(v, _)| v)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `s * x` for a single-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("scalar-mul", format!("scalar operand has shape {:?}", sv.shape())));
        }
        let out = self.value(x).map(|v| sv.item() * v);
        Ok(self.push(out, Op::ScalarMul { s, x }))
    }

    /// `factor * x` for a constant factor.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| factor * v);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (x.shape(), y.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", format!("{:?} x {:?}", x.shape(), y.shape()))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }))
    }

    /// Square-kernel convolution. `w` is `Co x Ci x k x k`; `b` is `Co`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [co, wci, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be 4-D, got {ws:?}")));
        };
        if wci != ci || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {ci} vs weight {ws:?} (square kernels only)"),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh} larger than padded input {h}x{wd}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{co}]", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            co,
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_parts(vec![n, co, geom.out_height(), geom.out_width()], y);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, co }))
    }

    /// Transposed convolution. `w` is `Ci x Co x k x k`; output size is
    /// `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).dims4("transposed-conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [wci, co, kh, kw] = ws[..] else {
            return Err(Error::shape("transposed-conv2d", format!("weight must be 4-D, got {ws:?}")));
        };
        if wci != ci || kh != kw || stride == 0 {
            return Err(Error::shape("transposed-conv2d", format!("input channels {ci} vs weight {ws:?}")));
        }
        if (h - 1) * stride + kh <= 2 * pad {
            return Err(Error::shape("transposed-conv2d", "padding consumes the whole output"));
        }
        let (oh, ow) = ((h - 1) * stride + kh - 2 * pad, (wd - 1) * stride + kw - 2 * pad);
        let out_geom = ConvGeom {
            channels: co,
            height: oh,
            width: ow,
            kernel: kh,
            stride,
            pad,
        };
        if out_geom.out_height() != h || out_geom.out_width() != wd {
            return Err(Error::shape("transposed-conv2d", "inconsistent stride/padding geometry"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::shape("transposed-conv2d", format!("bias shape {:?}", self.value(b).shape())));
            }
        }
        let y = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            ci,
            &out_geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_parts(vec![n, co, oh, ow], y);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, out_geom, ci }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.map(|v| v.max(0.0));
        if self.tracks_branches() {
            let mut h = DefaultHasher::new();
            for v in t.data() {
                (*v > 0.0).hash(&mut h);
            }
            let sig = h.finish();
            self.record_branch(("relu", sig));
        }
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// Softmax over the trailing two (spatial) axes of a 4-D tensor, or
    /// over all elements of a lower-rank one.
    pub fn softmax_pixels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let plane = spatial_plane(t.shape());
        let mut out = t.data().to_vec();
        for chunk in out.chunks_mut(plane) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            chunk.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::SoftmaxPixels(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat-channels", "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims4("concat-channels")?;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let [n2, c, h2, w2] = self.value(v).dims4("concat-channels")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape(
                    "concat-channels",
                    format!("{:?} vs {:?}", self.value(first).shape(), self.value(v).shape()),
                ));
            }
            chans.push(c);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&v, &c) in xs.iter().zip(&chans) {
                data.extend_from_slice(&self.value(v).data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::from_parts(vec![n, total, h, w], data);
        Ok(self.push(out, Op::ConcatChannels(xs.to_vec())))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample-bilinear-2x")?;
        let y = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        Ok(self.push(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], y), Op::Upsample2x(x)))
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("avgpool-2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avgpool-2x", format!("odd spatial size {h}x{w}")));
        }
        let y = kernels::avgpool2x_forward(self.value(x).data(), n * c, h, w);
        Ok(self.push(Tensor::from_parts(vec![n, c, h / 2, w / 2], y), Op::AvgPool2x(x)))
    }

    /// Divides each channel vector (fixed sample and pixel) by
    /// `max(||v||, 1e-12)`.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("l2-normalize-channels")?;
        let plane = h * w;
        let src = t.data();
        let mut norms = vec![0.0; n * plane];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for p in 0..plane {
                    norms[s * plane + p] += src[base + p] * src[base + p];
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt().max(L2_EPS));
        let mut out = src.to_vec();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for p in 0..plane {
                    out[base + p] /= norms[s * plane + p];
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::L2NormalizeChannels { x, norms }))
    }

    /// Per-channel batch normalization of an NCHW tensor with affine
    /// `gamma`/`beta`. In [`BatchNormMode::Batch`] also returns the batch
    /// statistics for running-average updates.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: &BatchNormMode) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("batchnorm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("affine params {:?}/{:?} for {c} channels", self.value(gamma).shape(), self.value(beta).shape()),
            ));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let src = t.data();
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += src[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += src[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                    var[ch] = ss / m;
                }
                let unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", format!("running stats length vs {c} channels")));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for p in base..base + plane {
                    xhat[p] = (src[p] - mean[ch]) * inv_std[ch];
                    out[p] = g[ch] * xhat[p] + be[ch];
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let batch = matches!(mode, BatchNormMode::Batch);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
        );
        Ok((v, stats))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let inputs = node.op.inputs();
            let contributions = self.node_backward(node, &gout);
            grads[idx] = Some(gout);
            for (inp, g) in inputs.into_iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, gout: &Tensor) -> Vec<Option<Tensor>> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(_, _) => vec![Some(gout.clone()), Some(gout.clone())],
            Op::Sub(_, _) => vec![Some(gout.clone()), Some(gout.map(|v| -v))],
            Op::Mul(a, b) => {
                let ga = self.needs(*a).then(|| zip_map(gout, val(*b), |g, y| g * y));
                let gb = self.needs(*b).then(|| zip_map(gout, val(*a), |g, x| g * x));
                vec![ga, gb]
            }
            Op::ScalarMul { s, x } => {
                let sv = val(*s).item();
                let gs = self.needs(*s).then(|| {
                    let d: f64 = gout.data().iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                    Tensor::from_parts(val(*s).shape().to_vec(), vec![d])
                });
                let gx = self.needs(*x).then(|| gout.map(|g| g * sv));
                vec![gs, gx]
            }
            Op::Scale { factor, .. } => vec![Some(gout.map(|g| g * factor))],
            Op::MatMul { a, b, m, k, n } => {
                let ga = self.needs(*a).then(|| {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(*m, *n, *k, gout.data(), false, val(*b).data(), true, 0.0, &mut d);
                    Tensor::from_parts(vec![*m, *k], d)
                });
                let gb = self.needs(*b).then(|| {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(*k, *m, *n, val(*a).data(), true, gout.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![*k, *n], d)
                });
                vec![ga, gb]
            }
            Op::Conv2d { x, w, b, geom, co } => {
                let n = val(*x).shape()[0];
                let grads = kernels::conv2d_backward(
                    val(*x).data(),
                    n,
                    geom,
                    val(*w).data(),
                    *co,
                    gout.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                conv_grads_to_tensors(grads, val(*x), val(*w), *b, *co)
            }
            Op::ConvTranspose2d { x, w, b, out_geom, ci } => {
                let n = val(*x).shape()[0];
                let grads = kernels::conv_transpose2d_backward(
                    val(*x).data(),
                    n,
                    *ci,
                    out_geom,
                    val(*w).data(),
                    gout.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                conv_grads_to_tensors(grads, val(*x), val(*w), *b, out_geom.channels)
            }
            Op::Relu(x) => vec![Some(zip_map(gout, val(*x), |g, v| if v > 0.0 { g } else { 0.0 }))],
            Op::Exp(_) => vec![Some(zip_map(gout, &node.value, |g, y| g * y))],
            Op::SoftmaxPixels(_) => {
                let plane = spatial_plane(node.value.shape());
                let mut d = vec![0.0; gout.len()];
                for ((dc, gc), sc) in d
                    .chunks_mut(plane)
                    .zip(gout.data().chunks(plane))
                    .zip(node.value.data().chunks(plane))
                {
                    let dot: f64 = gc.iter().zip(sc).map(|(g, s)| g * s).sum();
                    for ((dv, g), s) in dc.iter_mut().zip(gc).zip(sc) {
                        *dv = s * (g - dot);
                    }
                }
                vec![Some(Tensor::from_parts(node.value.shape().to_vec(), d))]
            }
            Op::Sum(x) => vec![Some(Tensor::full(val(*x).shape(), gout.item()))],
            Op::Mean(x) => {
                let t = val(*x);
                vec![Some(Tensor::full(t.shape(), gout.item() / t.len() as f64))]
            }
            Op::ConcatChannels(xs) => {
                let [n, total, h, w] = node.value.dims4("concat-channels").expect("recorded 4-D");
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &v in xs {
                    let c = val(v).shape()[1];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let base = (s * total + offset) * plane;
                            d.extend_from_slice(&gout.data()[base..base + c * plane]);
                        }
                        out.push(Some(Tensor::from_parts(val(v).shape().to_vec(), d)));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = val(*x).dims4("upsample").expect("recorded 4-D");
                let d = kernels::upsample2x_backward(gout.data(), n * c, h, w);
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }
            Op::AvgPool2x(x) => {
                let [n, c, h, w] = val(*x).dims4("avgpool").expect("recorded 4-D");
                let d = kernels::avgpool2x_backward(gout.data(), n * c, h, w);
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }
            Op::L2NormalizeChannels { x, norms } => {
                let [n, c, h, w] = val(*x).dims4("l2norm").expect("recorded 4-D");
                let plane = h * w;
                let y = node.value.data();
                let g = gout.data();
                let mut d = vec![0.0; g.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let norm = norms[s * plane + p];
                        let at = |ch: usize| (s * c + ch) * plane + p;
                        if norm > L2_EPS {
                            let dot: f64 = (0..c).map(|ch| y[at(ch)] * g[at(ch)]).sum();
                            for ch in 0..c {
                                d[at(ch)] = (g[at(ch)] - y[at(ch)] * dot) / norm;
                            }
                        } else {
                            for ch in 0..c {
                                d[at(ch)] = g[at(ch)] / norm;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let [n, c, h, w] = val(*x).dims4("batchnorm").expect("recorded 4-D");
                let plane = h * w;
                let m = (n * plane) as f64;
                let g = gout.data();
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for p in base..base + plane {
                            dgamma[ch] += g[p] * xhat[p];
                            dbeta[ch] += g[p];
                        }
                    }
                }
                let dx = self.needs(*x).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for p in base..base + plane {
                                dx[p] = if *batch {
                                    gam[ch] * inv_std[ch] / m * (m * g[p] - dbeta[ch] - xhat[p] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * g[p]
                                };
                            }
                        }
                    }
                    Tensor::from_parts(vec![n, c, h, w], dx)
                });
                vec![
                    dx,
                    self.needs(*gamma).then(|| Tensor::from_parts(vec![c], dgamma)),
                    self.needs(*beta).then(|| Tensor::from_parts(vec![c], dbeta)),
                ]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                op.backward(&ins, &node.value, gout, &needs)
            }
        }
    }
}

const L2_EPS: f64 = 1e-12;

/// Size of the softmax group: `H*W` for 4-D tensors, everything otherwise.
fn spatial_plane(shape: &[usize]) -> usize {
    match shape {
        [_, _, h, w] => h * w,
        _ => shape.iter().product(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn conv_grads_to_tensors(g: kernels::ConvGrads, x: &Tensor, w: &Tensor, b: Option<Var>, co: usize) -> Vec<Option<Tensor>> {
    let mut out = vec![
        g.dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        g.dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    ];
    if b.is_some() {
        out.push(g.db.map(|d| Tensor::from_parts(vec![co], d)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 5], 7.25));
        let y = g.softmax_pixels(x).unwrap();
        for plane in g.value(y).data().chunks(20) {
            assert!(plane.iter().all(|v| (v - 0.05).abs() < 1e-15));
            assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unknown_kind_and_shape_errors() {
        assert!(matches!("gelu".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.apply(OpKind::Add, &[a, b], &Attrs::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn unused_parameter_gets_exact_zero_grad() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::from_vec(vec![1.0, 2.0]));
        let unused = store.add("unused", Tensor::from_vec(vec![5.0]));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let loss = g.sum(u);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        assert_eq!(store.get(unused).grad.as_ref().unwrap().data(), &[0.0]);
        assert_eq!(store.get(used).grad.as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(vec![3.0]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&mut store);
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(p).grad.as_ref().unwrap().data(), &[12.0]);
    }

    #[test]
    fn frozen_parameter_never_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(vec![3.0]));
        store.freeze();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        assert!(!g.requires_grad(v));
        let loss = g.sum(v);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        assert!(store.get(p).grad.is_none());
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[3, 5, 4, 4], 0.1));
        let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
    }
}
