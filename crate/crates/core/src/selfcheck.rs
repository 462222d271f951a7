//! Finite-difference gradient checks for every differentiable primitive and
//! for the full student pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, BatchNormMode, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::kpgraph::{compose_decoder_input, mask_batch, render_edge_map_var, soft_argmax_var, MaskPattern};
use crate::losses::{cosine_kd_loss, perceptual_loss, total_loss, LossConfig};
use crate::nets::{FeatureExtractor, KeypointModel, Mode, ModelConfig, Tap};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Central-difference step used by the checks.
pub const STEP: f64 = 1e-5;

/// One named check.
#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Reduces `out` to a scalar through a fixed random weighting, so every
/// output element contributes a distinct sensitivity.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = uniform(&mut rng, g.value(out).shape(), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// `(name, input, build)` for every primitive, with operands drawn from `seed`.
fn primitive_cases(seed: u64) -> Vec<(&'static str, Tensor, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(&'static str, Tensor, Build)> = Vec::new();
    let s = seed;

    let other = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let (o1, o2, o3) = (other.clone(), other.clone(), other.clone());
    cases.push(("add", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let y = g.constant(o1.clone());
        let z = g.add(x, y)?;
        probe(g, z, s)
    })));
    cases.push(("sub", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let y = g.constant(o2.clone());
        let z = g.sub(y, x)?;
        probe(g, z, s)
    })));
    cases.push(("mul", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let y = g.constant(o3.clone());
        let z = g.mul(x, x)?;
        let z = g.mul(z, y)?;
        probe(g, z, s)
    })));
    let xs = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    cases.push(("scalar_mul/scalar", uniform(r, &[1], 0.2, 2.0), Box::new(move |g, a| {
        let x = g.constant(xs.clone());
        let z = g.scalar_mul(a, x)?;
        probe(g, z, s)
    })));
    let a0 = uniform(r, &[1], 0.2, 2.0);
    cases.push(("scalar_mul/tensor", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let a = g.constant(a0.clone());
        let z = g.scalar_mul(a, x)?;
        let z = g.scale(z, -1.7);
        probe(g, z, s)
    })));
    let mb = uniform(r, &[5, 4], -1.0, 1.0);
    cases.push(("matmul", uniform(r, &[3, 5], -1.0, 1.0), Box::new(move |g, x| {
        let b = g.constant(mb.clone());
        let z = g.matmul(x, b)?;
        let bt = g.constant(Tensor::from_parts(vec![4, 2], vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, 0.9]));
        let z = g.matmul(z, bt)?;
        probe(g, z, s)
    })));

    for (name, stride, pad) in [("conv2d", 1, 1), ("conv2d/stride2", 2, 1), ("conv2d/1x1", 1, 0)] {
        let k = if name == "conv2d/1x1" { 1 } else { 3 };
        let w = uniform(r, &[4, 3, k, k], -0.5, 0.5);
        let b = uniform(r, &[4], -0.5, 0.5);
        let x0 = uniform(r, &[2, 3, 6, 6], -1.0, 1.0);
        let (w1, b1) = (w.clone(), b.clone());
        cases.push((name, x0.clone(), Box::new(move |g, x| {
            let (wv, bv) = (g.constant(w1.clone()), g.constant(b1.clone()));
            let z = g.conv2d(x, wv, Some(bv), stride, pad)?;
            probe(g, z, s)
        })));
        let (x1, b2) = (x0.clone(), b.clone());
        let weight_name = match name {
            "conv2d" => "conv2d/weight",
            "conv2d/stride2" => "conv2d/stride2/weight",
            _ => "conv2d/1x1/weight",
        };
        cases.push((weight_name, w, Box::new(move |g, wv| {
            let (x, bv) = (g.constant(x1.clone()), g.constant(b2.clone()));
            let z = g.conv2d(x, wv, Some(bv), stride, pad)?;
            probe(g, z, s)
        })));
        let (x2, w2) = (x0, uniform(r, &[4, 3, k, k], -0.5, 0.5));
        let bias_name = match name {
            "conv2d" => "conv2d/bias",
            "conv2d/stride2" => "conv2d/stride2/bias",
            _ => "conv2d/1x1/bias",
        };
        cases.push((bias_name, b, Box::new(move |g, bv| {
            let (x, wv) = (g.constant(x2.clone()), g.constant(w2.clone()));
            let z = g.conv2d(x, wv, Some(bv), stride, pad)?;
            probe(g, z, s)
        })));
    }

    let tw = uniform(r, &[3, 2, 4, 4], -0.5, 0.5);
    let tb = uniform(r, &[2], -0.5, 0.5);
    let tx = uniform(r, &[2, 3, 3, 3], -1.0, 1.0);
    let (tw1, tb1) = (tw.clone(), tb.clone());
    cases.push(("conv_transpose2d", tx.clone(), Box::new(move |g, x| {
        let (wv, bv) = (g.constant(tw1.clone()), g.constant(tb1.clone()));
        let z = g.conv_transpose2d(x, wv, Some(bv), 2, 1)?;
        probe(g, z, s)
    })));
    let (tx1, tb2) = (tx.clone(), tb.clone());
    cases.push(("conv_transpose2d/weight", tw.clone(), Box::new(move |g, wv| {
        let (x, bv) = (g.constant(tx1.clone()), g.constant(tb2.clone()));
        let z = g.conv_transpose2d(x, wv, Some(bv), 2, 1)?;
        probe(g, z, s)
    })));
    cases.push(("conv_transpose2d/bias", tb, Box::new(move |g, bv| {
        let (x, wv) = (g.constant(tx.clone()), g.constant(tw.clone()));
        let z = g.conv_transpose2d(x, wv, Some(bv), 2, 1)?;
        probe(g, z, s)
    })));

    cases.push(("relu", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let z = g.relu(x);
        probe(g, z, s)
    })));
    cases.push(("exp", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let z = g.exp(x);
        probe(g, z, s)
    })));
    cases.push(("softmax_pixels", uniform(r, &[2, 3, 4, 4], -2.0, 2.0), Box::new(move |g, x| {
        let z = g.softmax_pixels(x)?;
        probe(g, z, s)
    })));
    cases.push(("sum_mean", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let sq = g.mul(x, x)?;
        let a = g.sum(sq);
        let b = g.mean(x);
        let b = g.scale(b, 3.0);
        g.add(a, b)
    })));
    let cat_other = uniform(r, &[2, 2, 4, 4], -1.0, 1.0);
    cases.push(("concat_channels", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let y = g.constant(cat_other.clone());
        let z = g.concat_channels(&[y, x, y])?;
        probe(g, z, s)
    })));
    cases.push(("upsample2x", uniform(r, &[2, 3, 3, 4], -1.0, 1.0), Box::new(move |g, x| {
        let z = g.upsample2x(x)?;
        probe(g, z, s)
    })));
    cases.push(("avgpool2x", uniform(r, &[2, 3, 4, 6], -1.0, 1.0), Box::new(move |g, x| {
        let z = g.avgpool2x(x)?;
        probe(g, z, s)
    })));
    cases.push(("l2_normalize_channels", uniform(r, &[2, 3, 4, 4], -1.0, 1.0), Box::new(move |g, x| {
        let z = g.l2_normalize_channels(x)?;
        probe(g, z, s)
    })));

    let (bg, bb) = (uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5));
    let (bg1, bb1, bg2, bb2) = (bg.clone(), bb.clone(), bg.clone(), bb.clone());
    cases.push(("batchnorm/batch", uniform(r, &[4, 3, 3, 3], -1.0, 1.0), Box::new(move |g, x| {
        let (gv, bv) = (g.constant(bg1.clone()), g.constant(bb1.clone()));
        let (z, _) = g.batchnorm(x, gv, bv, &BatchNormMode::Batch)?;
        probe(g, z, s)
    })));
    let bx = uniform(r, &[4, 3, 3, 3], -1.0, 1.0);
    cases.push(("batchnorm/gamma", bg.clone(), Box::new(move |g, gv| {
        let (x, bv) = (g.constant(bx.clone()), g.constant(bb2.clone()));
        let (z, _) = g.batchnorm(x, gv, bv, &BatchNormMode::Batch)?;
        probe(g, z, s)
    })));
    let fixed = BatchNormMode::Fixed {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 0.9],
    };
    cases.push(("batchnorm/fixed", uniform(r, &[2, 3, 3, 3], -1.0, 1.0), Box::new(move |g, x| {
        let (gv, bv) = (g.constant(bg2.clone()), g.constant(bb.clone()));
        let (z, _) = g.batchnorm(x, gv, bv, &fixed)?;
        probe(g, z, s)
    })));

    cases.push(("soft_argmax", uniform(r, &[2, 3, 5, 6], -2.0, 2.0), Box::new(move |g, x| {
        let z = soft_argmax_var(g, x)?;
        probe(g, z, s)
    })));
    let logits = uniform(r, &[6], -1.0, 1.0);
    let logits1 = logits.clone();
    cases.push(("edge_map/keypoints", uniform(r, &[2, 4, 2], -0.8, 0.8), Box::new(move |g, k| {
        let l = g.constant(logits1.clone());
        let z = render_edge_map_var(g, k, l, 0.05, 8, 8)?;
        probe(g, z, s)
    })));
    let kps = uniform(r, &[2, 4, 2], -0.8, 0.8);
    cases.push(("edge_map/logits", logits, Box::new(move |g, l| {
        let k = g.constant(kps.clone());
        let z = render_edge_map_var(g, k, l, 0.05, 8, 8)?;
        probe(g, z, s)
    })));

    let patterns = [MaskPattern::from_seed(seed), MaskPattern::from_seed(seed + 1)];
    let (p1, p2) = (patterns.clone(), patterns);
    let (alpha, edge) = (uniform(r, &[1], 0.3, 1.5), uniform(r, &[2, 1, 16, 16], 0.0, 1.0));
    let (alpha1, edge1) = (alpha.clone(), edge.clone());
    cases.push(("mask_compose/image", uniform(r, &[2, 3, 16, 16], 0.0, 1.0), Box::new(move |g, x| {
        let m = mask_batch(g, x, &p1)?;
        let (a, e) = (g.constant(alpha1.clone()), g.constant(edge1.clone()));
        let z = compose_decoder_input(g, m, a, e)?;
        probe(g, z, s)
    })));
    let img = uniform(r, &[2, 3, 16, 16], 0.0, 1.0);
    cases.push(("mask_compose/edge", edge, Box::new(move |g, e| {
        let x = g.constant(img.clone());
        let m = mask_batch(g, x, &p2)?;
        let a = g.constant(alpha.clone());
        let z = compose_decoder_input(g, m, a, e)?;
        probe(g, z, s)
    })));

    let teacher = uniform(r, &[2, 4, 3, 3], -1.0, 1.0);
    let teacher1 = teacher.clone();
    cases.push(("cosine_kd/per_location", uniform(r, &[2, 4, 3, 3], -1.0, 1.0), Box::new(move |g, x| {
        let t = g.constant(teacher1.clone());
        cosine_kd_loss(g, x, t, false)
    })));
    cases.push(("cosine_kd/flatten", uniform(r, &[2, 4, 3, 3], -1.0, 1.0), Box::new(move |g, x| {
        let t = g.constant(teacher.clone());
        cosine_kd_loss(g, x, t, true)
    })));
    let target = uniform(r, &[2, 3, 16, 16], 0.0, 1.0);
    let fx = FeatureExtractor::new(3, &[4, 4], seed);
    cases.push(("perceptual", uniform(r, &[2, 3, 16, 16], 0.0, 1.0), Box::new(move |g, x| {
        let t = g.constant(target.clone());
        perceptual_loss(g, &fx, t, x)
    })));
    cases
}

/// Checks every primitive against central differences.
pub fn primitive_checks(seed: u64) -> Result<Vec<NamedReport>> {
    primitive_cases(seed)
        .into_iter()
        .map(|(name, input, build)| {
            Ok(NamedReport {
                name: name.to_string(),
                report: grad_check(build, &input, STEP, None)?,
            })
        })
        .collect()
}

/// Small student pipeline on `2 x 3 x 16 x 16` inputs: detector, soft-argmax,
/// edge map, masking, decoder, perceptual loss plus a cosine term against a
/// fixed random teacher embedding.
pub struct PipelineFixture {
    pub model: KeypointModel,
    pub image: Tensor,
    pub teacher: Tensor,
    pub patterns: Vec<MaskPattern>,
    pub fx: FeatureExtractor,
    pub sigma2: f64,
    pub mode: Mode,
}

impl PipelineFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = ModelConfig {
            image_channels: 3,
            keypoints: 4,
            widths: [4, 4, 8, 8],
        };
        let model = KeypointModel::new(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
        let image = uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
        let teacher = uniform(&mut rng, &[2, 4, 16, 16], -1.0, 1.0);
        Ok(PipelineFixture {
            model,
            image,
            teacher,
            patterns: vec![MaskPattern::from_seed(seed), MaskPattern::from_seed(seed + 7)],
            fx: FeatureExtractor::new(3, &[4, 8], seed),
            sigma2: 0.02,
            mode: Mode::Train,
        })
    }

    /// Total loss for `image` with the model's current parameters.
    pub fn loss(&self, g: &mut Graph, image: Var) -> Result<(Var, Vec<Option<Var>>)> {
        let mut cx = self.model.ctx(g, self.mode);
        let out = self.model.reconstruct(&mut cx, image, &self.patterns, self.sigma2)?;
        let params: Vec<Option<Var>> = cx.param_vars();
        let lp = perceptual_loss(cx.g, &self.fx, image, out.reconstruction)?;
        let t = cx.g.constant(self.teacher.clone());
        let lcos = cosine_kd_loss(cx.g, out.detector.tap(Tap::Output), t, false)?;
        let cfg = LossConfig {
            gamma: 0.5,
            ..Default::default()
        };
        Ok((total_loss(cx.g, lp, Some(lcos), &cfg)?, params))
    }

    /// Gradient of the total loss with respect to the input image.
    pub fn check_input(&self, coords: &[usize]) -> Result<GradCheckReport> {
        grad_check(|g, x| Ok(self.loss(g, x)?.0), &self.image, STEP, Some(coords))
    }

    fn eval_with(&self, id: ParamId, value: Tensor) -> Result<(f64, u64)> {
        let mut probe = self.shallow();
        probe.model.store.get_mut(id).value = value;
        let mut g = Graph::with_branch_tracking();
        let x = g.constant(probe.image.clone());
        let (l, _) = probe.loss(&mut g, x)?;
        Ok((g.value(l).item(), g.branch_signature()))
    }

    fn shallow(&self) -> PipelineFixture {
        PipelineFixture {
            model: self.model.clone(),
            image: self.image.clone(),
            teacher: self.teacher.clone(),
            patterns: self.patterns.clone(),
            fx: self.fx.clone(),
            sigma2: self.sigma2,
            mode: self.mode,
        }
    }

    /// Gradient of the total loss with respect to parameter `id`, on
    /// `coords` of its flattened value.
    pub fn check_param(&self, id: ParamId, coords: &[usize]) -> Result<GradCheckReport> {
        let mut g = Graph::with_branch_tracking();
        let x = g.constant(self.image.clone());
        let (loss, params) = self.loss(&mut g, x)?;
        let base_sig = g.branch_signature();
        let grads = g.backward(loss)?;
        let base = self.model.store.value(id).clone();
        let analytic = params[id.index()]
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: None,
            excluded: Vec::new(),
            checked: 0,
        };
        for &i in coords {
            let mut plus = base.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = base.clone();
            minus.data_mut()[i] -= STEP;
            let (fp, sp) = self.eval_with(id, plus)?;
            let (fm, sm) = self.eval_with(id, minus)?;
            if sp != base_sig || sm != base_sig {
                report.excluded.push(i);
                continue;
            }
            let fd = (fp - fm) / (2.0 * STEP);
            let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if report.worst_index.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
        Ok(report)
    }
}

/// Input and per-parameter checks of the pipeline fixture for `seed`, each
/// on up to `per_tensor` randomly chosen coordinates.
pub fn pipeline_checks(seed: u64, per_tensor: usize) -> Result<Vec<NamedReport>> {
    let fx = PipelineFixture::new(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pick = |len: usize| -> Vec<usize> {
        if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        }
    };
    let mut out = vec![NamedReport {
        name: "pipeline/image".into(),
        report: fx.check_input(&pick(fx.image.len()))?,
    }];
    let ids: Vec<(ParamId, String, usize)> = fx
        .model
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.len()))
        .collect();
    for (id, name, len) in ids {
        out.push(NamedReport {
            name: format!("pipeline/{name}"),
            report: fx.check_param(id, &pick(len))?,
        });
    }
    Ok(out)
}
