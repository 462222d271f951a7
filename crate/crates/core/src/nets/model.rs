use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::decoder::DecoderModel;
use super::detector::{DetectorModel, DetectorOutput};
use super::layers::{apply_bn_updates, BnState, Ctx, Mode};
use crate::autodiff::{AdamState, BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::kpgraph::{self, EdgeWeights, MaskPattern};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Architecture hyperparameters shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub keypoints: usize,
    pub widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 3,
            keypoints: 8,
            widths: [32, 64, 128, 256],
        }
    }
}

/// Detector, decoder, edge weights and the masked-image scale `alpha`,
/// with all trainable parameters in one store.
#[derive(Clone, Debug)]
pub struct KeypointModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bn: Vec<BnState>,
    pub detector: DetectorModel,
    pub decoder: DecoderModel,
    pub edge_logits: ParamId,
    pub alpha: ParamId,
}

/// Every intermediate of one reconstruction forward.
pub struct PipelineOutput {
    pub detector: DetectorOutput,
    pub keypoints: Var,
    pub edge: Var,
    pub masked: Var,
    pub composed: Var,
    pub reconstruction: Var,
}

impl KeypointModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.keypoints < 2 {
            return Err(Error::Config(format!("need at least 2 keypoints, got {}", config.keypoints)));
        }
        if config.widths.contains(&0) || config.image_channels == 0 {
            return Err(Error::Config(format!("invalid widths {:?}", config.widths)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bn = Vec::new();
        let detector = DetectorModel::new(&mut store, &mut bn, &mut rng, config.image_channels, config.widths, config.keypoints);
        let decoder = DecoderModel::new(&mut store, &mut bn, &mut rng, config.image_channels, config.widths);
        let edge_logits = store.add("edge.logits", Tensor::zeros(&[EdgeWeights::num_pairs(config.keypoints)]));
        let alpha = store.add("alpha", Tensor::scalar(1.0));
        Ok(KeypointModel {
            config,
            store,
            bn,
            detector,
            decoder,
            edge_logits,
            alpha,
        })
    }

    pub fn ctx<'a>(&'a self, g: &'a mut Graph, mode: Mode) -> Ctx<'a> {
        Ctx::new(g, &self.store, &self.bn, mode)
    }

    pub fn edge_weights(&self) -> EdgeWeights {
        EdgeWeights::from_logits(self.config.keypoints, self.store.value(self.edge_logits).data())
            .expect("logit count fixed at construction")
    }

    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        apply_bn_updates(&mut self.bn, updates);
    }

    /// Detector forward only.
    pub fn detect(&self, cx: &mut Ctx, image: Var) -> Result<DetectorOutput> {
        self.detector.forward(cx, image)
    }

    /// Detect keypoints, render their edge map, mask the image, compose
    /// `[alpha * masked ; edge]` and decode.
    pub fn reconstruct(&self, cx: &mut Ctx, image: Var, patterns: &[MaskPattern], sigma2: f64) -> Result<PipelineOutput> {
        let [_, c, h, w] = cx.g.value(image).dims4("pipeline")?;
        if c != self.config.image_channels {
            return Err(Error::shape("pipeline", format!("{c} image channels, model expects {}", self.config.image_channels)));
        }
        let detector = self.detector.forward(cx, image)?;
        let keypoints = kpgraph::soft_argmax_var(cx.g, detector.heatmaps)?;
        let logits = cx.p(self.edge_logits);
        let edge = kpgraph::render_edge_map_var(cx.g, keypoints, logits, sigma2, h, w)?;
        let masked = kpgraph::mask_batch(cx.g, image, patterns)?;
        let alpha = cx.p(self.alpha);
        let composed = kpgraph::compose_decoder_input(cx.g, masked, alpha, edge)?;
        let reconstruction = self.decoder.forward(cx, composed)?;
        Ok(PipelineOutput {
            detector,
            keypoints,
            edge,
            masked,
            composed,
            reconstruction,
        })
    }

    /// Batched eval-mode keypoints for images `N x C x H x W`.
    pub fn predict_keypoints(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut cx = self.ctx(&mut g, Mode::Eval);
        let x = cx.g.constant(images.clone());
        let det = self.detector.forward(&mut cx, x)?;
        let kp = kpgraph::soft_argmax_var(cx.g, det.heatmaps)?;
        Ok(g.value(kp).clone())
    }

    /// Named buffers (batchnorm running statistics), in layer order.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.bn.len());
        for s in &self.bn {
            out.push((format!("{}.running_mean", s.name), Tensor::from_vec(s.mean.clone())));
            out.push((format!("{}.running_var", s.name), Tensor::from_vec(s.var.clone())));
        }
        out
    }

    /// Architecture keys echoed into checkpoint configs.
    pub fn config_echo(&self) -> Vec<(String, String)> {
        let c = &self.config;
        vec![
            ("image_channels".into(), c.image_channels.to_string()),
            ("keypoints".into(), c.keypoints.to_string()),
            ("widths".into(), c.widths.map(|w| w.to_string()).join(",")),
        ]
    }

    /// Parameters as `param.<name>`, running statistics as
    /// `buffer.<name>`, and Adam moments as `adam.m.<name>` / `adam.v.<name>`.
    pub fn state_tensors(&self, adam: Option<&AdamState>) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(_, p)| (format!("param.{}", p.name), p.value.clone()))
            .collect();
        out.extend(self.buffers().into_iter().map(|(n, t)| (format!("buffer.{n}"), t)));
        if let Some(a) = adam {
            for ((_, p), (m, v)) in self.store.iter().zip(a.m.iter().zip(&a.v)) {
                out.push((format!("adam.m.{}", p.name), m.clone()));
                out.push((format!("adam.v.{}", p.name), v.clone()));
            }
        }
        out
    }

    /// Rebuilds a model from a checkpoint written with [`Self::state_tensors`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let key = |k: &str| {
            ck.config
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("config echo lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            key(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{k}` in config echo")))
        };
        let widths: Vec<usize> = key("widths")?
            .split(',')
            .map(|w| w.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint("bad `widths` in config echo".into()))?;
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|_| Error::Checkpoint("`widths` needs four entries".into()))?;
        let config = ModelConfig {
            image_channels: num("image_channels")?,
            keypoints: num("keypoints")?,
            widths,
        };
        let mut model = KeypointModel::new(config, 0)?;
        model.load_state(ck)?;
        Ok(model)
    }

    /// Overwrites parameters and running statistics from `ck`.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = ck
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, model expects {shape:?}", t.shape())));
            }
            Ok(t.clone())
        };
        for p in self.store.iter_mut() {
            p.value = fetch(format!("param.{}", p.name), p.value.shape())?;
        }
        for s in &mut self.bn {
            let c = s.mean.len();
            s.mean = fetch(format!("buffer.{}.running_mean", s.name), &[c])?.into_data();
            s.var = fetch(format!("buffer.{}.running_var", s.name), &[c])?.into_data();
        }
        Ok(())
    }

    /// Adam moments stored in `ck`, if any.
    pub fn load_adam(&self, ck: &Checkpoint) -> Result<Option<AdamState>> {
        let mut m = Vec::with_capacity(self.store.len());
        let mut v = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            match (ck.get(&format!("adam.m.{}", p.name)), ck.get(&format!("adam.v.{}", p.name))) {
                (Some(a), Some(b)) if a.shape() == p.value.shape() && b.shape() == p.value.shape() => {
                    m.push(a.clone());
                    v.push(b.clone());
                }
                (None, None) if m.is_empty() => return Ok(None),
                _ => return Err(Error::Checkpoint(format!("incomplete Adam state for `{}`", p.name))),
            }
        }
        Ok(Some(AdamState {
            step: ck.adam_step,
            m,
            v,
        }))
    }
}
