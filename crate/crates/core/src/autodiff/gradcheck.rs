//! Central finite-difference verification of analytic gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(1, |fd|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: Option<usize>,
    /// Coordinates whose `±step` probes changed a branch decision (relu
    /// sign, argmax winner, clamp state); these straddle a kink and are
    /// skipped.
    pub excluded: Vec<usize>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the gradient of the scalar produced by `build` against central
/// differences of step `step`, on the coordinates `coords` (all when
/// `None`).
pub fn grad_check<F>(build: F, input: &Tensor, step: f64, coords: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |x: Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::with_branch_tracking();
        let v = g.leaf(x, false);
        let out = build(&mut g, v)?;
        let val = g.value(out);
        if !val.is_scalar() {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        Ok((val.item(), g.branch_signature()))
    };

    let mut g = Graph::with_branch_tracking();
    let v = g.leaf(input.clone(), true);
    let out = build(&mut g, v)?;
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));
    if let Some(i) = analytic.first_non_finite() {
        return Err(Error::NonFinite {
            index: i,
            context: "analytic gradient".into(),
        });
    }

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..input.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        excluded: Vec::new(),
        checked: 0,
    };
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: "finite-difference probe".into(),
            });
        }
        if sp != base_sig || sm != base_sig {
            report.excluded.push(i);
            continue;
        }
        let fd = (fp - fm) / (2.0 * step);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
