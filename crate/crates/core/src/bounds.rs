//! Empirical evaluation of the covariate-shift risk bound and the
//! CMP/Brier bound on voxel ECE.
//!
//! The risk bound contains the product of the source Fisher `I(θ)` and the
//! target score covariance `Σ_shift` under a square root with no norm. It is
//! scalarized here as `tr(I·Σ_shift)`; for `P > 64` only traces are kept and
//! `tr(I)·tr(Σ_shift)` (an upper bound for PSD factors) is used instead. The
//! `O(n^{-1/2})` term is reported with constant `c = 1` and `c = 0`.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::math::{log_softmax, argmax};
use crate::metrics::{brier_volume, voxel_ece, VoxelConfidence};
use crate::models::ModelHandle;
use crate::params::ParamVector;
use crate::penalties::{cmp_voxel_argmax, fisher_global, ScoreModel, FULL_MATRIX_MAX_PARAMS};
use crate::shiftgen::ShiftedDataset;
use crate::volume::{MaskVolume, ProbVolume};

/// Per-sample loss `ℓ(y, f_θ(x))` of the risk bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLoss {
    #[default]
    CrossEntropy,
    ZeroOne,
}

/// How `tr(I·Σ_shift)` was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Exact trace of the matrix product.
    Matrix,
    /// `tr(I)·tr(Σ_shift)`, used when the parameter count exceeds the matrix limit.
    TraceProduct,
}

/// Covariance of target scores about their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaShift {
    pub dim: usize,
    pub trace: f64,
    /// Row-major `P×P` matrix when `P ≤ 64`.
    pub matrix: Option<Vec<f64>>,
}

impl SigmaShift {
    pub fn estimate<M: ScoreModel>(model: &M, theta: &[f64], target: &Batch) -> Result<Self> {
        if target.is_empty() {
            return invalid("empty target sample");
        }
        let p = theta.len();
        let n = target.len() as f64;
        let scores: Vec<Vec<f64>> = (0..target.len()).map(|i| model.score(theta, target.x(i), target.y(i))).collect();
        let mut mean = vec![0.0; p];
        for s in &scores {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / n);
        }
        let centered: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
        let trace = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
        let matrix = (p <= FULL_MATRIX_MAX_PARAMS).then(|| {
            let mut m = vec![0.0; p * p];
            for c in &centered {
                for a in 0..p {
                    for b in 0..p {
                        m[a * p + b] += c[a] * c[b];
                    }
                }
            }
            m.iter_mut().for_each(|v| *v /= n);
            m
        });
        Ok(SigmaShift { dim: p, trace, matrix })
    }

    /// `vᵀ Σ v` (matrix mode only).
    pub fn quadratic_form(&self, v: &[f64]) -> Option<f64> {
        let m = self.matrix.as_ref()?;
        let p = self.dim;
        Some((0..p).map(|a| (0..p).map(|b| v[a] * m[a * p + b] * v[b]).sum::<f64>()).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBoundReport {
    pub risk_src: f64,
    pub risk_tgt: f64,
    pub fisher_trace: f64,
    pub shift_cov_trace: f64,
    /// `tr(I·Σ_shift)` (see `trace_mode`).
    pub trace_product: f64,
    pub trace_mode: TraceMode,
    /// Bound with `c = 1`.
    pub bound_value: f64,
    /// Bound with `c = 0`.
    pub bound_value_c0: f64,
    pub constant: f64,
    /// `bound_value − risk_tgt`.
    pub slack: f64,
    pub kl_src_tgt: f64,
    /// `Cov_src(w, ℓ)` with the true density ratio `w`.
    pub cov_term: f64,
    /// `√(Var w · Var ℓ)`.
    pub cauchy_schwarz_bound: f64,
    pub cauchy_schwarz_holds: bool,
    /// `E_src[w·ℓ]`.
    pub iw_risk: f64,
    pub iw_risk_se: f64,
    pub risk_tgt_se: f64,
    pub weight_mean: f64,
    pub weight_se: f64,
    pub n_src: usize,
    pub n_tgt: usize,
}

impl RiskBoundReport {
    /// `|E_src[w·ℓ] − R_tgt|` in units of the combined standard error.
    pub fn change_of_measure_z(&self) -> f64 {
        let se = (self.iw_risk_se.powi(2) + self.risk_tgt_se.powi(2)).sqrt();
        (self.iw_risk - self.risk_tgt).abs() / se
    }

    /// `|E_src[w] − 1|` in standard errors.
    pub fn weight_mean_z(&self) -> f64 {
        (self.weight_mean - 1.0).abs() / self.weight_se
    }
}

fn sample_losses(model: &ModelHandle, theta: &[f64], batch: &Batch, loss: RiskLoss) -> Vec<f64> {
    model
        .logits_batch(theta, batch)
        .iter()
        .zip(&batch.labels)
        .map(|(z, y)| match loss {
            RiskLoss::CrossEntropy => -log_softmax(z)[*y],
            RiskLoss::ZeroOne => f64::from(u8::from(argmax(z) != *y)),
        })
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn population_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub fn eval_risk_bound(model: &ModelHandle, params: &ParamVector, data: &ShiftedDataset, loss: RiskLoss) -> Result<RiskBoundReport> {
    if data.source_weights.len() != data.source.len() {
        return Err(Error::Config("dataset carries no importance weights for its source split".into()));
    }
    if data.source.is_empty() || data.target.is_empty() {
        return invalid("both splits must be nonempty");
    }
    let theta = params.values();
    let src_loss = sample_losses(model, theta, &data.source, loss);
    let tgt_loss = sample_losses(model, theta, &data.target, loss);
    let (risk_src, _) = mean_and_se(&src_loss);
    let (risk_tgt, risk_tgt_se) = mean_and_se(&tgt_loss);

    let fisher = fisher_global(model, params, &data.source)?;
    let sigma = SigmaShift::estimate(model, theta, &data.target)?;
    let (trace_product, trace_mode) = match (&fisher.matrix, &sigma.matrix) {
        (Some(i), Some(s)) => {
            let p = sigma.dim;
            let t: f64 = (0..p).map(|a| (0..p).map(|b| i[a * p + b] * s[b * p + a]).sum::<f64>()).sum();
            (t, TraceMode::Matrix)
        }
        _ => (fisher.scalar * sigma.trace, TraceMode::TraceProduct),
    };
    let n_src = data.source.len();
    let constant = 1.0;
    let root = 0.5 * trace_product.max(0.0).sqrt();
    let bound_value_c0 = risk_src + root;
    let bound_value = bound_value_c0 + constant / (n_src as f64).sqrt();

    let w = &data.source_weights;
    let wl: Vec<f64> = w.iter().zip(&src_loss).map(|(a, b)| a * b).collect();
    let (iw_risk, iw_risk_se) = mean_and_se(&wl);
    let (weight_mean, weight_se) = mean_and_se(w);
    let loss_mean = src_loss.iter().sum::<f64>() / n_src as f64;
    let cov_term = w.iter().zip(&src_loss).map(|(a, b)| (a - weight_mean) * (b - loss_mean)).sum::<f64>() / n_src as f64;
    let cauchy_schwarz_bound = (population_var(w) * population_var(&src_loss)).sqrt();
    let cauchy_schwarz_holds = cov_term.abs() <= cauchy_schwarz_bound * (1.0 + 1e-12) + 1e-300;

    Ok(RiskBoundReport {
        risk_src,
        risk_tgt,
        fisher_trace: fisher.scalar,
        shift_cov_trace: sigma.trace,
        trace_product,
        trace_mode,
        bound_value,
        bound_value_c0,
        constant,
        slack: bound_value - risk_tgt,
        kl_src_tgt: data.spec.kl_src_tgt(),
        cov_term,
        cauchy_schwarz_bound,
        cauchy_schwarz_holds,
        iw_risk,
        iw_risk_se,
        risk_tgt_se,
        weight_mean,
        weight_se,
        n_src,
        n_tgt: data.target.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBoundReport {
    pub ece_measured: f64,
    pub cmp_3d: f64,
    pub n: usize,
    pub brier: f64,
    /// `√(cmp_3d / n) + brier`.
    pub bound_value: f64,
    pub holds: bool,
}

impl EceBoundReport {
    pub fn from_parts(ece_measured: f64, cmp_3d: f64, n: usize, brier: f64) -> Self {
        let bound_value = (cmp_3d / n as f64).sqrt() + brier;
        EceBoundReport { ece_measured, cmp_3d, n, brier, bound_value, holds: ece_measured <= bound_value }
    }
}

pub fn eval_ece_bound(prob_volume: &ProbVolume, truth: &MaskVolume, num_bins: usize) -> Result<EceBoundReport> {
    if prob_volume.data.is_empty() {
        return invalid("empty volume");
    }
    let ece = voxel_ece(prob_volume, truth, num_bins, VoxelConfidence::Argmax)?.ece;
    let cmp = cmp_voxel_argmax(prob_volume)?.value;
    let brier = brier_volume(prob_volume, truth)?;
    Ok(EceBoundReport::from_parts(ece, cmp, prob_volume.data.len(), brier))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::shiftgen::{gen_classification, ShiftKind, ShiftSpec};
    use crate::volume::{Dims, Spacing};

    #[test]
    fn constant_half_predictor() {
        let d = Dims::new(8, 1, 1);
        let p = ProbVolume::new(d, Spacing::default(), vec![0.5; 8]).unwrap();
        let t = MaskVolume::new(d, Spacing::default(), vec![1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
        let r = eval_ece_bound(&p, &t, 10).unwrap();
        // every voxel predicts foreground at confidence 0.5; 5/8 correct
        assert!((r.ece_measured - (0.625 - 0.5)).abs() < 1e-15);
        assert!((r.bound_value - ((1.0f64 / 8.0).sqrt() + 0.25)).abs() < 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn base_rate_predictor_is_calibrated() {
        let d = Dims::new(10, 1, 1);
        let p = ProbVolume::new(d, Spacing::default(), vec![0.7; 10]).unwrap();
        let t = MaskVolume::new(d, Spacing::default(), vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
        let r = eval_ece_bound(&p, &t, 10).unwrap();
        assert!(r.ece_measured < 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn missing_weights_is_config_error() {
        let mut ds = gen_classification(&ShiftSpec::new(ShiftKind::MeanShift, 1.0, 20, 20, 2, 2, 1)).unwrap();
        ds.source_weights.clear();
        let m = ModelHandle::linear_softmax(2, 2, 0).unwrap();
        assert!(matches!(eval_risk_bound(&m, &m.params, &ds, RiskLoss::CrossEntropy), Err(Error::Config(_))));
    }

    #[test]
    fn sigma_shift_is_psd() {
        let ds = gen_classification(&ShiftSpec::new(ShiftKind::CovarianceScale, 1.0, 10, 200, 3, 3, 4)).unwrap();
        let m = ModelHandle::mlp1(3, 4, 3, 2).unwrap();
        let s = SigmaShift::estimate(&m, m.params.values(), &ds.target).unwrap();
        let mut rng = RngState::new(3);
        for _ in 0..50 {
            let v: Vec<f64> = (0..s.dim).map(|_| rng.next_normal()).collect();
            assert!(s.quadratic_form(&v).unwrap() >= -1e-12);
        }
        assert!(s.trace >= 0.0);
    }

    #[test]
    fn risk_bound_fields_are_consistent() {
        let ds = gen_classification(&ShiftSpec::new(ShiftKind::MeanShift, 0.5, 500, 500, 2, 3, 6)).unwrap();
        let m = ModelHandle::linear_softmax(3, 2, 1).unwrap();
        let r = eval_risk_bound(&m, &m.params, &ds, RiskLoss::CrossEntropy).unwrap();
        assert!(r.fisher_trace >= 0.0 && r.shift_cov_trace >= 0.0 && r.trace_product >= 0.0);
        assert!(r.cauchy_schwarz_holds);
        assert_eq!(r.trace_mode, TraceMode::Matrix);
        assert!((r.bound_value - r.bound_value_c0 - 1.0 / (500f64).sqrt()).abs() < 1e-12);
        assert!((r.slack - (r.bound_value - r.risk_tgt)).abs() < 1e-15);
    }
}
