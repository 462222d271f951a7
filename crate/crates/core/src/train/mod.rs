//! Teacher pretraining on depth, freezing, and student training on RGB
//! with optional embedding distillation from the frozen teacher.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Graph};
use crate::error::{Error, Result};
use crate::kpgraph::MaskPattern;
use crate::losses::{cosine_kd_loss, perceptual_loss, total_loss};
use crate::nets::{Checkpoint, FeatureExtractor, KeypointModel, Mode, RngState, Tap};
use crate::synthdata::{stack_depth3, stack_rgb, Scene};
use crate::tensor::Tensor;

pub mod ablation;
mod config;

pub use config::{TrainConfig, TrainMode};

/// Stream of the data RNG (batch indices and mask seeds); stream 0 of the
/// same seed initializes weights.
const DATA_STREAM: u64 = 1;
const TRACE_LEN: usize = 20;

/// One logged iteration. Distillation columns are `None` when no
/// distillation term is active.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lp: f64,
    pub lcos: Option<f64>,
    pub total: f64,
    pub mean_cosine: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,L_p,L_cos,total,mean_cosine";

pub fn format_log(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{:?},{},{:?},{}", r.iter, r.lp, opt(r.lcos), r.total, opt(r.mean_cosine)).expect("string write");
    }
    out
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, format_log(rows)).map_err(|e| Error::io(path, e))
}

/// Trained model plus everything needed to persist or inspect the run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: KeypointModel,
    pub adam: Adam,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Read-only teacher: parameters frozen, batchnorm on running statistics.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    model: KeypointModel,
}

impl FrozenTeacher {
    pub fn model(&self) -> &KeypointModel {
        &self.model
    }

    /// Detector embedding at `tap` for `N x C x H x W` images.
    pub fn embed(&self, images: &Tensor, tap: Tap) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut cx = self.model.ctx(&mut g, Mode::Eval);
        let x = cx.g.constant(images.clone());
        let out = self.model.detect(&mut cx, x)?;
        Ok(g.value(out.tap(tap)).clone())
    }
}

pub fn freeze(ck: &Checkpoint) -> Result<FrozenTeacher> {
    let mut model = KeypointModel::from_checkpoint(ck)?;
    model.store.freeze();
    Ok(FrozenTeacher { model })
}

fn masked(images: &Tensor, patterns: &[MaskPattern]) -> Result<Tensor> {
    let [_, c, h, w] = images.dims4("grid-mask")?;
    let mut data = images.data().to_vec();
    for (chunk, p) in data.chunks_mut(c * h * w).zip(patterns) {
        for (v, m) in chunk.iter_mut().zip(p.pixel_mask(c, h, w)?) {
            *v *= m;
        }
    }
    Tensor::new(images.shape().to_vec(), data)
}

/// Seeded sampler of training batches: scene indices (with replacement) and
/// one mask pattern per sample, drawn from stream 1 of the run seed.
#[derive(Clone, Debug)]
pub struct BatchStream {
    rng: ChaCha8Rng,
    n_scenes: usize,
    batch_size: usize,
}

impl BatchStream {
    pub fn new(seed: u64, n_scenes: usize, batch_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        BatchStream {
            rng,
            n_scenes,
            batch_size,
        }
    }

    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<MaskPattern>) {
        let idx = (0..self.batch_size).map(|_| self.rng.random_range(0..self.n_scenes)).collect();
        let patterns = (0..self.batch_size).map(|_| MaskPattern::from_seed(self.rng.random())).collect();
        (idx, patterns)
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }
}

pub fn train_teacher(depth_scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.mode != TrainMode::Teacher {
        return Err(Error::Config(format!("train_teacher needs mode teacher, got {}", cfg.mode)));
    }
    run(depth_scenes, None, cfg)
}

pub fn train_student(rgb_scenes: &[Scene], teacher: Option<&FrozenTeacher>, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.mode == TrainMode::Teacher {
        return Err(Error::Config("train_student needs mode student or student_no_kd".into()));
    }
    run(rgb_scenes, teacher, cfg)
}

fn run(scenes: &[Scene], teacher: Option<&FrozenTeacher>, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let loss_cfg = cfg.loss_config();
    let kd_tap = loss_cfg.active_tap();
    let teacher = match (kd_tap, teacher) {
        (Some(_), None) => return Err(Error::Config("distillation requires a teacher checkpoint".into())),
        (Some(_), Some(t)) => Some(t),
        (None, _) => None,
    };
    if let Some(t) = teacher {
        if t.model.config.keypoints != cfg.keypoints || t.model.config.widths != cfg.widths {
            return Err(Error::shape(
                "cosine-kd",
                format!(
                    "teacher (K={}, widths {:?}) and student (K={}, widths {:?}) embeddings differ",
                    t.model.config.keypoints, t.model.config.widths, cfg.keypoints, cfg.widths
                ),
            ));
        }
    }

    let mut model = KeypointModel::new(cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new(cfg.lr, &model.store);
    let fx = FeatureExtractor::default_for(3);
    let mut stream = BatchStream::new(cfg.seed, scenes.len(), cfg.batch_size);
    let mut log = Vec::new();
    let mut trace = Vec::with_capacity(TRACE_LEN);

    for iter in 1..=cfg.iterations {
        let (idx, patterns) = stream.next_batch();
        let batch: Vec<&Scene> = idx.iter().map(|&i| &scenes[i]).collect();
        let input = match cfg.mode {
            TrainMode::Teacher => stack_depth3(&batch)?,
            _ => stack_rgb(&batch)?,
        };

        let mut g = Graph::new();
        let mut cx = model.ctx(&mut g, Mode::Train);
        let x = cx.g.constant(input);
        let out = model.reconstruct(&mut cx, x, &patterns, cfg.sigma2)?;
        let lp = perceptual_loss(cx.g, &fx, x, out.reconstruction)?;
        let lcos = match (kd_tap, teacher) {
            (Some(tap), Some(t)) => {
                let depth = stack_depth3(&batch)?;
                let depth = if cfg.teacher_masked { masked(&depth, &patterns)? } else { depth };
                let zt = cx.g.constant(t.embed(&depth, tap)?);
                Some(cosine_kd_loss(cx.g, out.detector.tap(tap), zt, cfg.flatten_cosine)?)
            }
            _ => None,
        };
        let total = total_loss(cx.g, lp, lcos, &loss_cfg)?;
        let updates = std::mem::take(&mut cx.bn_updates);

        let total_v = g.value(total).item();
        if trace.len() == TRACE_LEN {
            trace.remove(0);
        }
        trace.push(total_v);
        if !total_v.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                loss: total_v,
                trace,
            });
        }
        let grads = g.backward(total)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        adam.step(&mut model.store)?;
        model.apply_bn_updates(&updates);

        if iter == 1 || iter % cfg.log_every == 0 || iter == cfg.iterations {
            let lcos_v = lcos.map(|v| g.value(v).item());
            let row = LogRow {
                iter,
                lp: g.value(lp).item(),
                lcos: lcos_v,
                total: total_v,
                mean_cosine: lcos_v.map(|c| -c),
            };
            log::debug!("{} iter {iter}: total {total_v:.6}", cfg.mode);
            log.push(row);
        }
    }

    let mut checkpoint = Checkpoint {
        iteration: cfg.iterations as u64,
        adam_step: adam.state.step,
        rng: Some(stream.rng_state()),
        tensors: model.state_tensors(Some(&adam.state)),
        ..Default::default()
    };
    checkpoint.config.extend(cfg.echo());
    checkpoint.config.extend(model.config_echo());
    Ok(TrainRun {
        model,
        adam,
        checkpoint,
        log,
    })
}
