//! Central-difference gradient checks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::LossBreakdown;
use crate::models::ModelHandle;
use crate::rng::RngState;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. With a relative tolerance of 1e-4
/// this turns into an absolute tolerance of 1e-7 for gradients near zero.
pub const FD_ABS_FLOOR: f64 = 1e-3;

/// A scalar objective, its gradient and the piecewise gates it was evaluated under.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    pub gates: Vec<u8>,
}

impl From<LossBreakdown> for Evaluation {
    fn from(l: LossBreakdown) -> Self {
        Evaluation { value: l.total, grad: l.grad, gates: l.gates }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked_coordinates: usize,
    /// Coordinates whose stencil crossed a gate change (a kink), left unchecked.
    pub skipped_coordinates: usize,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked_coordinates > 0 && self.max_relative_error < tol
    }

    /// Combines reports of independent checks.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.checked_coordinates += other.checked_coordinates;
        self.skipped_coordinates += other.skipped_coordinates;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` at `theta` with central
/// differences on `trials` random coordinates (all coordinates if `trials`
/// exceeds the dimension).
pub fn finite_diff_check_at<F>(theta: &[f64], loss_fn: F, trials: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    if trials == 0 {
        return invalid("at least one trial is required");
    }
    if theta.is_empty() {
        return invalid("empty parameter vector");
    }
    let base = loss_fn(theta)?;
    if base.grad.len() != theta.len() {
        return invalid(format!("gradient has {} entries for {} parameters", base.grad.len(), theta.len()));
    }
    let coords: Vec<usize> = if trials >= theta.len() {
        (0..theta.len()).collect()
    } else {
        let mut rng = RngState::stream(seed, 0x6664);
        (0..trials).map(|_| rng.below(theta.len() as u64) as usize).collect()
    };
    let mut report = GradCheckReport { max_relative_error: 0.0, checked_coordinates: 0, skipped_coordinates: 0, step: FD_STEP };
    let mut probe = theta.to_vec();
    for j in coords {
        probe[j] = theta[j] + FD_STEP;
        let plus = loss_fn(&probe)?;
        probe[j] = theta[j] - FD_STEP;
        let minus = loss_fn(&probe)?;
        probe[j] = theta[j];
        if plus.gates != base.gates || minus.gates != base.gates {
            report.skipped_coordinates += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * FD_STEP);
        let err = relative_error(base.grad[j], numeric);
        report.max_relative_error = report.max_relative_error.max(if err.is_nan() { f64::INFINITY } else { err });
        report.checked_coordinates += 1;
    }
    Ok(report)
}

/// [`finite_diff_check_at`] starting from the model's current parameters.
pub fn finite_diff_check<F>(model: &ModelHandle, loss_fn: F, trials: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    finite_diff_check_at(model.params.values(), loss_fn, trials, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Batch;
    use crate::losses::{loss_vision, LossBreakdown};
    use crate::penalties::PenaltyConfig;

    fn quadratic(t: &[f64]) -> Result<Evaluation> {
        let value = t.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
        let grad = t.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        Ok(Evaluation { value, grad, gates: Vec::new() })
    }

    #[test]
    fn quadratic_control_is_exact() {
        let r = finite_diff_check_at(&[0.3, -1.2, 2.5, 0.01], quadratic, 4, 1).unwrap();
        assert_eq!(r.checked_coordinates, 4);
        assert!(r.max_relative_error < 1e-8, "{}", r.max_relative_error);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let bad = |t: &[f64]| {
            let mut e = quadratic(t)?;
            e.grad[1] *= 1.1;
            Ok(e)
        };
        let r = finite_diff_check_at(&[0.3, -1.2, 2.5], bad, 3, 1).unwrap();
        assert!(r.max_relative_error > 1e-2);
    }

    #[test]
    fn gate_changes_are_skipped() {
        let abs = |t: &[f64]| Ok(Evaluation { value: t[0].abs(), grad: vec![t[0].signum()], gates: vec![u8::from(t[0] > 0.0)] });
        let r = finite_diff_check_at(&[1e-7], abs, 1, 1).unwrap();
        assert_eq!(r.skipped_coordinates, 1);
        assert_eq!(r.checked_coordinates, 0);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn composite_vision_loss_checks_out() {
        let m = ModelHandle::linear_softmax(3, 3, 5).unwrap();
        let batch = Batch::new(3, vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.3, -0.7, 0.9, 0.1], vec![0, 2, 1]).unwrap();
        let cfg = PenaltyConfig::new(0.4, 0.5);
        let f = |t: &[f64]| loss_vision(&m, t, &batch, &cfg).map(|l: LossBreakdown| l.into());
        let r = finite_diff_check(&m, f, 100, 3).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
