//! Parameterized layers and the per-forward context they record into.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormMode, BatchStats, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Batchnorm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages updated by the caller.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    bn: &'a [BnState],
    pub mode: Mode,
    cache: Vec<Option<Var>>,
    /// Batch statistics per batchnorm slot gathered in [`Mode::Train`].
    pub bn_updates: Vec<(usize, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, bn: &'a [BnState], mode: Mode) -> Self {
        Ctx {
            g,
            store,
            bn,
            mode,
            cache: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    /// Graph leaves created so far, indexed by parameter.
    pub fn param_vars(&self) -> Vec<Option<Var>> {
        self.cache.clone()
    }

    /// Graph leaf for a parameter, created once per forward.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.index()] {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.cache[id.index()] = Some(v);
        v
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 4x4 stride-2 transposed convolution (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl ConvT {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        // Each output pixel of a stride-2 4x4 transposed conv sees 2x2 taps per input channel.
        let w = store.add(format!("{name}.weight"), he_normal(rng, &[cin, cout, 4, 4], cin * 4));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvT { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.conv_transpose2d(x, w, b, 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, bn: &mut Vec<BnState>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        bn.push(BnState {
            name: name.to_string(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        BatchNorm {
            gamma,
            beta,
            slot: bn.len() - 1,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        let mode = match cx.mode {
            Mode::Train => BatchNormMode::Batch,
            Mode::Eval => {
                let s = &cx.bn[self.slot];
                BatchNormMode::Fixed {
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                }
            }
        };
        let (y, stats) = cx.g.batchnorm(x, gamma, beta, &mode)?;
        if let Some(stats) = stats {
            cx.bn_updates.push((self.slot, stats));
        }
        Ok(y)
    }
}

/// Blends batch statistics into running averages.
pub fn apply_bn_updates(bn: &mut [BnState], updates: &[(usize, BatchStats)]) {
    for (slot, stats) in updates {
        let s = &mut bn[*slot];
        for (r, b) in s.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in s.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}
