use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed perceptual feature stack: each stage is a 3x3 conv, ReLU and 2x
/// average pool. Weights are drawn once from a seed and never trained.
/// Emitted stage maps are scaled by `1/sqrt(C*H*W)`, so a squared feature
/// distance is a per-element mean and does not grow with resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<(Tensor, Tensor)>,
    pub seed: u64,
}

pub const DEFAULT_FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_FEATURE_SEED: u64 = 0x5EED_F00D;

impl FeatureExtractor {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for &w in widths {
            let fan_in = cin * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let weight = Tensor::from_parts(vec![w, cin, 3, 3], (0..w * fan_in).map(|_| dist.sample(&mut rng)).collect());
            stages.push((weight, Tensor::zeros(&[w])));
            cin = w;
        }
        FeatureExtractor { stages, seed }
    }

    pub fn default_for(in_channels: usize) -> Self {
        Self::new(in_channels, &DEFAULT_FEATURE_WIDTHS, DEFAULT_FEATURE_SEED)
    }

    /// No stages: the single "feature map" is the image itself.
    pub fn identity() -> Self {
        FeatureExtractor {
            stages: Vec::new(),
            seed: 0,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage feature maps for an `N x C x H x W` batch; gradient flows to the
    /// image only.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.value(image).dims4("feature-extract")?;
        let div = 1usize << self.stages.len();
        for dim in [h, w] {
            if dim % div != 0 {
                return Err(Error::Indivisible {
                    dim,
                    divisor: div,
                    context: "feature extractor input",
                });
            }
        }
        if let Some((w0, _)) = self.stages.first() {
            if w0.shape()[1] != c {
                return Err(Error::shape("feature-extract", format!("{c} channels, stack expects {}", w0.shape()[1])));
            }
        }
        if self.stages.is_empty() {
            return Ok(vec![image]);
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for (weight, bias) in &self.stages {
            let wv = g.constant(weight.clone());
            let bv = g.constant(bias.clone());
            let y = g.conv2d(x, wv, Some(bv), 1, 1)?;
            let y = g.relu(y);
            x = g.avgpool2x(y)?;
            let [_, c, h, w] = g.value(x).dims4("feature-extract")?;
            out.push(g.scale(x, 1.0 / ((c * h * w) as f64).sqrt()));
        }
        Ok(out)
    }
}
