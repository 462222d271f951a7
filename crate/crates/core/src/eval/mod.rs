//! Keypoint metrics: a linear regressor from detected keypoints to annotated
//! joints, normalized regressed L2, PCK and summed-L2 MAE.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::KeypointModel;
use crate::synthdata::{stack_joints, stack_rgb, Scene};
use crate::tensor::Tensor;

/// Resolution at which PCK and MAE are reported.
pub const REPORT_SIZE: usize = 256;
/// PCK threshold in pixels at [`REPORT_SIZE`].
pub const PCK_THRESHOLD_PX: f64 = 6.0;
/// Penalty used when the design matrix is rank deficient.
pub const RIDGE: f64 = 1e-6;

/// Affine map from flattened keypoints (`2K`) to flattened joints (`2J`).
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub k: usize,
    pub j: usize,
    /// `2J x 2K`, row-major.
    pub a: Vec<f64>,
    /// `2J`.
    pub b: Vec<f64>,
    /// The fit fell back to ridge regression.
    pub ridge: bool,
}

fn points(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, k, 2] => Ok((n, k)),
        s => Err(Error::shape(what, format!("expected N x K x 2, got {s:?}"))),
    }
}

/// Least squares with intercept, minimizing `sum ||A pred + b - gt||^2`.
pub fn fit_regressor(pred: &Tensor, gt: &Tensor) -> Result<Regressor> {
    let (n, k) = points(pred, "fit-regressor")?;
    let (ng, j) = points(gt, "fit-regressor")?;
    if n != ng {
        return Err(Error::shape("fit-regressor", format!("{n} predictions vs {ng} annotations")));
    }
    let cols = 2 * k + 1;
    if n < cols {
        return Err(Error::InvalidArgument(format!(
            "regression needs at least {cols} images for K={k}, got {n}"
        )));
    }
    let x = DMatrix::from_fn(n, cols, |r, c| if c < 2 * k { pred.data()[r * 2 * k + c] } else { 1.0 });
    let y = DMatrix::from_row_slice(n, 2 * j, gt.data());

    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let full_rank = diag_max > 0.0 && r.diagonal().iter().all(|v| v.abs() > 1e-10 * diag_max);
    let solved = if full_rank {
        let qty = qr.q().transpose() * &y;
        r.solve_upper_triangular(&qty)
    } else {
        None
    };
    let (w, ridge) = match solved {
        Some(w) => (w, false),
        None => {
            log::warn!("rank-deficient keypoint design matrix; falling back to ridge regression ({RIDGE})");
            let mut xtx = x.transpose() * &x;
            for d in 0..2 * k {
                xtx[(d, d)] += RIDGE;
            }
            let xty = x.transpose() * &y;
            let w = xtx
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("regression system is singular even with ridge".into()))?
                .solve(&xty);
            (w, true)
        }
    };
    // w is (2K+1) x 2J; A = w[..2K]^T, b = last row.
    let mut a = vec![0.0; 2 * j * 2 * k];
    let mut b = vec![0.0; 2 * j];
    for o in 0..2 * j {
        for i in 0..2 * k {
            a[o * 2 * k + i] = w[(i, o)];
        }
        b[o] = w[(2 * k, o)];
    }
    Ok(Regressor { k, j, a, b, ridge })
}

impl Regressor {
    pub fn identity(k: usize) -> Self {
        let d = 2 * k;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = 1.0;
        }
        Regressor {
            k,
            j: k,
            a,
            b: vec![0.0; d],
            ridge: false,
        }
    }

    /// Maps `N x K x 2` keypoints to `N x J x 2` joints.
    pub fn apply(&self, pred: &Tensor) -> Result<Tensor> {
        let (n, k) = points(pred, "apply-regressor")?;
        if k != self.k {
            return Err(Error::shape("apply-regressor", format!("fit for K={}, got K={k}", self.k)));
        }
        let (din, dout) = (2 * self.k, 2 * self.j);
        let mut out = Vec::with_capacity(n * dout);
        for x in pred.data().chunks(din) {
            for o in 0..dout {
                let row = &self.a[o * din..(o + 1) * din];
                out.push(self.b[o] + row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>());
            }
        }
        Tensor::new(vec![n, self.j, 2], out)
    }
}

/// Normalized `[-1, 1]` coordinates to pixels of a `size x size` image.
pub fn to_pixels(t: &Tensor, size: usize) -> Tensor {
    let half = size as f64 / 2.0;
    t.map(|v| (v + 1.0) * half)
}

fn check_pair(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<()> {
    points(pred, op)?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

fn distances<'a>(pred: &'a Tensor, gt: &'a Tensor) -> impl Iterator<Item = f64> + 'a {
    pred.data()
        .chunks(2)
        .zip(gt.data().chunks(2))
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
}

/// Mean joint error of regressed predictions, in pixels divided by the image
/// size, times 100. Coordinates are normalized.
pub fn regressed_l2(reg: &Regressor, pred: &Tensor, gt: &Tensor, image_size: usize) -> Result<f64> {
    let mapped = reg.apply(pred)?;
    check_pair(&mapped, gt, "regressed-l2")?;
    if mapped.is_empty() {
        return Err(Error::InvalidArgument("regressed L2 over an empty set".into()));
    }
    let (mp, gp) = (to_pixels(&mapped, image_size), to_pixels(gt, image_size));
    let count = mapped.len() / 2;
    Ok(distances(&mp, &gp).sum::<f64>() / count as f64 / image_size as f64 * 100.0)
}

/// Fraction of (image, joint) pairs within `threshold_px` (inclusive).
pub fn pck(pred_px: &Tensor, gt_px: &Tensor, threshold_px: f64) -> Result<f64> {
    check_pair(pred_px, gt_px, "pck")?;
    let count = pred_px.len() / 2;
    if count == 0 {
        return Err(Error::InvalidArgument("PCK over an empty set".into()));
    }
    Ok(distances(pred_px, gt_px).filter(|&d| d <= threshold_px).count() as f64 / count as f64)
}

/// Mean over images of the per-image sum of joint L2 errors.
pub fn mae(pred_px: &Tensor, gt_px: &Tensor) -> Result<f64> {
    check_pair(pred_px, gt_px, "mae")?;
    let (n, _) = points(pred_px, "mae")?;
    if n == 0 {
        return Err(Error::InvalidArgument("MAE over an empty set".into()));
    }
    Ok(distances(pred_px, gt_px).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub regressed_l2: f64,
    pub pck: f64,
    pub mae: f64,
    pub n_images: usize,
    pub config: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }
}

/// Fits on the training predictions and scores the test split. `image_size`
/// is the resolution the predictions live at; PCK and MAE are measured after
/// rescaling to [`REPORT_SIZE`].
pub fn evaluate_predictions(
    pred_train: &Tensor,
    gt_train: &Tensor,
    pred_test: &Tensor,
    gt_test: &Tensor,
    image_size: usize,
) -> Result<MetricReport> {
    let reg = fit_regressor(pred_train, gt_train)?;
    let l2 = regressed_l2(&reg, pred_test, gt_test, image_size)?;
    let mapped = to_pixels(&reg.apply(pred_test)?, REPORT_SIZE);
    let gt = to_pixels(gt_test, REPORT_SIZE);
    let mut config = BTreeMap::new();
    config.insert("image_size".into(), image_size.to_string());
    config.insert("report_size".into(), REPORT_SIZE.to_string());
    config.insert("pck_threshold_px".into(), format!("{PCK_THRESHOLD_PX:?}"));
    config.insert("ridge_fallback".into(), reg.ridge.to_string());
    Ok(MetricReport {
        regressed_l2: l2,
        pck: pck(&mapped, &gt, PCK_THRESHOLD_PX)?,
        mae: mae(&mapped, &gt)?,
        n_images: points(pred_test, "evaluate")?.0,
        config,
    })
}

/// Eval-mode keypoints for RGB scenes, `N x K x 2`.
pub fn predict(model: &KeypointModel, scenes: &[Scene]) -> Result<Tensor> {
    const CHUNK: usize = 32;
    let k = model.config.keypoints;
    let mut data = Vec::with_capacity(scenes.len() * k * 2);
    for chunk in scenes.chunks(CHUNK) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        data.extend_from_slice(model.predict_keypoints(&stack_rgb(&refs)?)?.data());
    }
    Tensor::new(vec![scenes.len(), k, 2], data)
}

/// Where the predictions scored by [`evaluate_model`] come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionSource {
    Model,
    /// Ground truth passed off as predictions; checks the metric wiring.
    GroundTruth,
}

/// Runs the detector on both splits, fits on train and reports on test.
pub fn evaluate_model(model: &KeypointModel, train: &[Scene], test: &[Scene], source: PredictionSource) -> Result<MetricReport> {
    if test.is_empty() || train.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs non-empty train and test splits".into()));
    }
    let overlap = test.iter().filter(|t| train.iter().any(|s| s.seed == t.seed)).count();
    if overlap > 0 {
        log::warn!("{overlap} test scenes also appear in the regression split");
    }
    let size = test[0].size;
    let gt_train = stack_joints(&train.iter().collect::<Vec<_>>())?;
    let gt_test = stack_joints(&test.iter().collect::<Vec<_>>())?;
    let (pred_train, pred_test) = match source {
        PredictionSource::Model => (predict(model, train)?, predict(model, test)?),
        PredictionSource::GroundTruth => (gt_train.clone(), gt_test.clone()),
    };
    let mut report = evaluate_predictions(&pred_train, &gt_train, &pred_test, &gt_test, size)?;
    report.config.extend(model.config_echo());
    report.config.insert("n_train".into(), train.len().to_string());
    if source == PredictionSource::GroundTruth {
        report.config.insert("predictions".into(), "ground_truth".into());
    }
    Ok(report)
}

/// One row per image: `x0,y0,x1,y1,...` in normalized coordinates.
pub fn format_predictions(pred: &Tensor) -> Result<String> {
    let (_, k) = points(pred, "write-predictions")?;
    let mut out = String::new();
    let header: Vec<String> = (0..k).flat_map(|i| [format!("x{i}"), format!("y{i}")]).collect();
    writeln!(out, "{}", header.join(",")).expect("string write");
    for row in pred.data().chunks(2 * k.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("string write");
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, pred: &Tensor) -> Result<()> {
    std::fs::write(path, format_predictions(pred)?).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines();
    let width = lines.next().ok_or_else(|| bad(1, "empty prediction file"))?.split(',').count();
    if width < 2 || width % 2 != 0 {
        return Err(bad(1, "header must list x/y column pairs"));
    }
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 2, "non-numeric cell"))?;
        if row.len() != width {
            return Err(bad(i + 2, &format!("{} cells, header has {width}", row.len())));
        }
        data.extend(row);
        n += 1;
    }
    Tensor::new(vec![n, width / 2, 2], data)
}
