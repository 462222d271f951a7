//! Perceptual reconstruction loss, negative-cosine embedding distillation
//! loss, and their weighted sum.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{FeatureExtractor, Tap};
use crate::tensor::Tensor;

/// Where (if anywhere) the distillation term attaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KdTap {
    Layer(Tap),
    None,
}

impl KdTap {
    pub const ALL: [KdTap; 4] = [
        KdTap::Layer(Tap::Output),
        KdTap::Layer(Tap::MidTc),
        KdTap::Layer(Tap::Early),
        KdTap::None,
    ];

    pub fn tap(self) -> Option<Tap> {
        match self {
            KdTap::Layer(t) => Some(t),
            KdTap::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KdTap::Layer(t) => t.name(),
            KdTap::None => "none",
        }
    }
}

impl fmt::Display for KdTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KdTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(KdTap::None);
        }
        s.parse::<Tap>()
            .map(KdTap::Layer)
            .map_err(|_| Error::Config(format!("unknown kd_tap `{s}` (expected output, mid_tc, early or none)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub kd_tap: KdTap,
    /// Cosine over whole flattened embeddings instead of per location.
    pub flatten: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            gamma: 0.1,
            kd_tap: KdTap::Layer(Tap::Output),
            flatten: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Tap whose embeddings contribute, or `None` when the term vanishes.
    pub fn active_tap(&self) -> Option<Tap> {
        if self.gamma == 0.0 {
            None
        } else {
            self.kd_tap.tap()
        }
    }
}

/// `(1/N) * sum_i sum_stages ||fx(original_i) - fx(reconstructed_i)||^2`.
pub fn perceptual_loss(g: &mut Graph, fx: &FeatureExtractor, original: Var, reconstructed: Var) -> Result<Var> {
    let (a, b) = (g.value(original).shape(), g.value(reconstructed).shape());
    if a != b {
        return Err(Error::shape("perceptual-loss", format!("original {a:?} vs reconstruction {b:?}")));
    }
    let n = g.value(original).dims4("perceptual-loss")?[0];
    let fa = fx.forward(g, original)?;
    let fb = fx.forward(g, reconstructed)?;
    let mut total: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = g.sub(x, y)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one feature stage");
    Ok(g.scale(total, 1.0 / n as f64))
}

struct Reshape {
    shape: Vec<usize>,
}

impl CustomOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| Tensor::from_parts(self.shape.clone(), grad_out.data().to_vec()))]
    }
}

fn flatten_to_channels(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let [n, c, h, w] = t.dims4("cosine-kd")?;
    let out = t.clone().reshape(&[n, c * h * w, 1, 1])?;
    let op = Reshape {
        shape: t.shape().to_vec(),
    };
    Ok(g.custom(&[x], out, Box::new(op)))
}

/// Negated mean cosine similarity between student and teacher embeddings
/// (`N x C x H x W`). Per-location over channels by default; with `flatten`,
/// one cosine per sample over the whole embedding.
///
/// `teacher` should carry no gradient; pass it as a constant or a frozen
/// forward.
pub fn cosine_kd_loss(g: &mut Graph, student: Var, teacher: Var, flatten: bool) -> Result<Var> {
    let (a, b) = (g.value(student).shape(), g.value(teacher).shape());
    if a != b {
        return Err(Error::shape("cosine-kd", format!("student embedding {a:?} vs teacher {b:?}")));
    }
    let (s, t) = if flatten {
        (flatten_to_channels(g, student)?, flatten_to_channels(g, teacher)?)
    } else {
        (student, teacher)
    };
    let [n, _, h, w] = g.value(s).dims4("cosine-kd")?;
    let zs = g.l2_normalize_channels(s)?;
    let zt = g.l2_normalize_channels(t)?;
    let dot = g.mul(zs, zt)?;
    let total = g.sum(dot);
    Ok(g.scale(total, -1.0 / (n * h * w) as f64))
}

/// `lambda * lp + gamma * lcos`; the cosine term is dropped entirely when
/// no tap is active.
pub fn total_loss(g: &mut Graph, lp: Var, lcos: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let weighted = g.scale(lp, cfg.lambda);
    match (cfg.active_tap(), lcos) {
        (Some(_), Some(c)) => {
            let kd = g.scale(c, cfg.gamma);
            g.add(weighted, kd)
        }
        (Some(tap), None) => Err(Error::InvalidArgument(format!("kd_tap {tap} active but no cosine term supplied"))),
        (None, _) => Ok(weighted),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_total(lambda: f64, gamma: f64, lp: f64, lcos: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(lp));
        let b = g.constant(Tensor::scalar(lcos));
        let cfg = LossConfig {
            lambda,
            gamma,
            ..Default::default()
        };
        let t = total_loss(&mut g, a, Some(b), &cfg).unwrap();
        g.value(t).item()
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(scalar_total(1.0, 0.0, 2.0, -0.7), 2.0);
        assert!((scalar_total(1.0, 0.1, 2.0, -0.5) - 1.95).abs() < 1e-12);
        assert!((scalar_total(1.0, 0.4, 2.0, -1.0) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn none_tap_ignores_gamma() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::scalar(3.0));
        let cfg = LossConfig {
            gamma: 0.7,
            kd_tap: KdTap::None,
            ..Default::default()
        };
        let t = total_loss(&mut g, lp, None, &cfg).unwrap();
        assert_eq!(g.value(t).item(), 3.0);
    }

    #[test]
    fn kd_tap_names_roundtrip() {
        for t in KdTap::ALL {
            assert_eq!(t.name().parse::<KdTap>().unwrap(), t);
        }
        assert!("middle".parse::<KdTap>().is_err());
    }

    #[test]
    fn identity_features_sum_squared_pixels() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let l = perceptual_loss(&mut g, &FeatureExtractor::identity(), a, b).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
    }

    #[test]
    fn rejects_negative_coefficients() {
        let cfg = LossConfig {
            gamma: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
