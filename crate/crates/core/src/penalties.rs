//! Fisher information penalty (global, two-tower and patch-wise 3D) and
//! confidence misalignment penalty (class-level and voxel-level).
//!
//! The Fisher penalty is the trace of the empirical Fisher,
//! `(1/n) Σ_i ‖∇_θ log p(y_i | x_i; θ)‖²`. Its parameter gradient,
//! `(2/n) Σ_i H_i g_i`, is obtained exactly by evaluating the score routine on
//! dual numbers seeded with `g_i` (forward-over-reverse).
//!
//! Indicator gates in the class CMP and the argmax label in the voxel CMP are
//! held fixed while differentiating. Ties (`P(y') = P(y)`) never fire.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Result};
use crate::math::{log_sum_exp, softmax_unchecked, Dual, ProbVector, Real};
use crate::models::{voxel_features, ModelHandle, IMG_SEGMENT, TXT_SEGMENT, VOXEL_FEATURES};
use crate::params::ParamVector;
use crate::volume::{ensure_same_dims, Dims, MaskVolume, ProbVolume, VolumeGrid};

/// Upper clamp margin on the argmax probability in the voxel CMP.
pub const CMP_CLAMP_EPS: f64 = 1e-6;

/// Largest parameter count for which the full Fisher matrix is materialized.
pub const FULL_MATRIX_MAX_PARAMS: usize = 64;

/// Anything exposing a per-sample score `∇_θ log p(y | x; θ)`.
pub trait ScoreModel {
    fn num_params(&self) -> usize;
    fn score<T: Real>(&self, theta: &[T], x: &[f64], label: usize) -> Vec<T>;
}

impl ScoreModel for ModelHandle {
    fn num_params(&self) -> usize {
        ModelHandle::num_params(self)
    }

    fn score<T: Real>(&self, theta: &[T], x: &[f64], label: usize) -> Vec<T> {
        ModelHandle::score(self, theta, x, label)
    }
}

/// One-parameter Gaussian location model `x ~ N(μ, σ²)`; its Fisher information is `1/σ²`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianMeanModel {
    pub sigma: f64,
}

impl ScoreModel for GaussianMeanModel {
    fn num_params(&self) -> usize {
        1
    }

    fn score<T: Real>(&self, theta: &[T], x: &[f64], _label: usize) -> Vec<T> {
        vec![(T::from_f64(x[0]) - theta[0]).scale(1.0 / (self.sigma * self.sigma))]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub edge: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { edge: 16, stride: 16 }
    }
}

impl PatchSpec {
    pub fn new(edge: usize, stride: usize) -> Result<Self> {
        if edge == 0 || stride == 0 {
            return invalid("patch edge and stride must be at least 1");
        }
        Ok(Self { edge, stride })
    }

    /// Voxel indices of every full patch; partial patches at the borders are dropped.
    pub fn tile(&self, dims: Dims) -> Result<Vec<Vec<usize>>> {
        if self.edge == 0 || self.stride == 0 {
            return invalid("patch edge and stride must be at least 1");
        }
        if dims.nx < self.edge || dims.ny < self.edge || dims.nz < self.edge {
            return invalid(format!("volume {:?} smaller than one {}^3 patch", dims.as_array(), self.edge));
        }
        let starts = |n: usize| (0..=n - self.edge).step_by(self.stride).collect::<Vec<_>>();
        let mut patches = Vec::new();
        for &z0 in &starts(dims.nz) {
            for &y0 in &starts(dims.ny) {
                for &x0 in &starts(dims.nx) {
                    let mut idx = Vec::with_capacity(self.edge.pow(3));
                    for z in z0..z0 + self.edge {
                        for y in y0..y0 + self.edge {
                            for x in x0..x0 + self.edge {
                                idx.push(dims.index(x, y, z));
                            }
                        }
                    }
                    patches.push(idx);
                }
            }
        }
        Ok(patches)
    }
}

/// Which labels enter the empirical Fisher.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherLabels {
    /// Observed training labels.
    #[default]
    Observed,
    /// The model's own argmax predictions (for unlabeled target inputs).
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub scalar: f64,
    pub per_segment: BTreeMap<String, f64>,
    /// Row-major `P×P` empirical Fisher, only when `P ≤ 64`.
    pub matrix: Option<Vec<f64>>,
}

impl FisherEstimate {
    pub fn dim(&self) -> Option<usize> {
        self.matrix.as_ref().map(|m| (m.len() as f64).sqrt().round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmpValue {
    pub value: f64,
    pub per_item: Vec<f64>,
}

/// Class-level confidence misalignment penalty of a single prediction.
pub fn cmp_class(probs: &ProbVector, true_label: usize) -> Result<f64> {
    let p = probs.values();
    if true_label >= p.len() {
        return invalid(format!("label {true_label} out of range for {} classes", p.len()));
    }
    let py = p[true_label];
    let mut total = 0.0;
    for (k, pk) in p.iter().enumerate() {
        if k == true_label || *pk <= py {
            continue;
        }
        let rest: f64 = p.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v).sum();
        total += pk / rest;
    }
    Ok(total)
}

/// Batch mean of [`cmp_class`].
pub fn cmp_vision(batch_probs: &[ProbVector], labels: &[usize]) -> Result<CmpValue> {
    if batch_probs.is_empty() {
        return invalid("empty batch");
    }
    if batch_probs.len() != labels.len() {
        return invalid(format!("{} predictions for {} labels", batch_probs.len(), labels.len()));
    }
    let per_item = batch_probs
        .iter()
        .zip(labels)
        .map(|(p, y)| cmp_class(p, *y))
        .collect::<Result<Vec<_>>>()?;
    let value = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CmpValue { value, per_item })
}

/// Voxel-level CMP: mean odds `p'/(1 − p')` of the predicted label's probability.
pub fn cmp_voxel(prob_volume: &ProbVolume, predicted_labels: &MaskVolume) -> Result<CmpValue> {
    ensure_same_dims(prob_volume.dims, predicted_labels.dims)?;
    let per_item: Vec<f64> = prob_volume
        .data
        .iter()
        .zip(&predicted_labels.data)
        .map(|(p, lab)| {
            let pv = if *lab == 1 { *p } else { 1.0 - *p };
            let pv = pv.min(1.0 - CMP_CLAMP_EPS);
            pv / (1.0 - pv)
        })
        .collect();
    let value = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CmpValue { value, per_item })
}

/// [`cmp_voxel`] with the argmax labels of `prob_volume` itself.
pub fn cmp_voxel_argmax(prob_volume: &ProbVolume) -> Result<CmpValue> {
    cmp_voxel(prob_volume, &prob_volume.predicted_mask())
}

fn check_batch<M: ScoreModel>(model: &M, params: &ParamVector, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if params.len() != model.num_params() {
        return invalid(format!("{} parameters for a model with {}", params.len(), model.num_params()));
    }
    Ok(())
}

/// Empirical Fisher over `batch`: trace, per-segment traces and (small `P`) full matrix.
pub fn fisher_global<M: ScoreModel>(model: &M, params: &ParamVector, batch: &Batch) -> Result<FisherEstimate> {
    check_batch(model, params, batch)?;
    let theta = params.values();
    let p = theta.len();
    let n = batch.len() as f64;
    let mut seg = vec![0.0; params.segments().len()];
    let mut matrix = (p <= FULL_MATRIX_MAX_PARAMS).then(|| vec![0.0; p * p]);
    for i in 0..batch.len() {
        let g = model.score(theta, batch.x(i), batch.y(i));
        for (s, acc) in params.segments().iter().zip(seg.iter_mut()) {
            *acc += g[s.range()].iter().map(|v| v * v).sum::<f64>();
        }
        if let Some(m) = matrix.as_mut() {
            for a in 0..p {
                for b in 0..p {
                    m[a * p + b] += g[a] * g[b];
                }
            }
        }
    }
    let per_segment: BTreeMap<String, f64> = params
        .segments()
        .iter()
        .zip(&seg)
        .map(|(s, v)| (s.name.clone(), v / n))
        .collect();
    if let Some(m) = matrix.as_mut() {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let scalar = per_segment.values().sum();
    Ok(FisherEstimate { scalar, per_segment, matrix })
}

/// `I(θ_img) + I(θ_txt)` for a two-tower parameter layout.
pub fn fisher_vision<M: ScoreModel>(model: &M, params: &ParamVector, batch: &Batch) -> Result<FisherEstimate> {
    params.segment(IMG_SEGMENT)?;
    params.segment(TXT_SEGMENT)?;
    let mut est = fisher_global(model, params, batch)?;
    est.scalar = est.per_segment[IMG_SEGMENT] + est.per_segment[TXT_SEGMENT];
    Ok(est)
}

/// Voxel samples of a volume: stencil features with the given per-voxel labels.
pub fn voxel_batch(volume: &VolumeGrid, labels: &MaskVolume) -> Result<Batch> {
    ensure_same_dims(volume.dims, labels.dims)?;
    let feats = voxel_features(volume)?;
    Batch::new(VOXEL_FEATURES, feats, labels.data.iter().map(|v| *v as usize).collect())
}

/// Patch-averaged empirical Fisher of a voxel model.
pub fn fisher_3d<M: ScoreModel>(
    model: &M,
    params: &ParamVector,
    volume: &VolumeGrid,
    labels: &MaskVolume,
    patches: PatchSpec,
) -> Result<FisherEstimate> {
    let tiles = patches.tile(volume.dims)?;
    let batch = voxel_batch(volume, labels)?;
    fisher_over_groups(model, params, &batch, &tiles)
}

/// Average of [`fisher_global`] over index groups of `batch`.
pub fn fisher_over_groups<M: ScoreModel>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    groups: &[Vec<usize>],
) -> Result<FisherEstimate> {
    if groups.is_empty() {
        return invalid("no patches");
    }
    let mut acc: Option<FisherEstimate> = None;
    for g in groups {
        let est = fisher_global(model, params, &batch.gather(g))?;
        acc = Some(match acc {
            None => est,
            Some(mut a) => {
                a.scalar += est.scalar;
                for (k, v) in est.per_segment {
                    *a.per_segment.get_mut(&k).expect("same layout") += v;
                }
                if let (Some(m), Some(e)) = (a.matrix.as_mut(), est.matrix) {
                    m.iter_mut().zip(e).for_each(|(x, y)| *x += y);
                }
                a
            }
        });
    }
    let mut a = acc.expect("nonempty");
    let k = groups.len() as f64;
    a.scalar /= k;
    a.per_segment.values_mut().for_each(|v| *v /= k);
    if let Some(m) = a.matrix.as_mut() {
        m.iter_mut().for_each(|v| *v /= k);
    }
    a.scalar = a.per_segment.values().sum();
    Ok(a)
}

/// Fisher trace over one group and its exact gradient `(2/n) Σ H_i g_i`.
pub fn fisher_trace_and_grad<M: ScoreModel>(
    model: &M,
    theta: &[f64],
    batch: &Batch,
    indices: &[usize],
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let p = theta.len();
    let n = indices.len() as f64;
    let mut trace = 0.0;
    let mut grad = vec![0.0; p];
    let mut seeded = vec![Dual::new(0.0, 0.0); p];
    for &i in indices {
        let x = batch.x(i);
        let g = model.score(theta, x, labels[i]);
        trace += g.iter().map(|v| v * v).sum::<f64>();
        for j in 0..p {
            seeded[j] = Dual::new(theta[j], g[j]);
        }
        let hg = model.score(&seeded, x, labels[i]);
        for j in 0..p {
            grad[j] += 2.0 * hg[j].eps;
        }
    }
    grad.iter_mut().for_each(|v| *v /= n);
    (trace / n, grad)
}

/// Whether the penalties take the classification or the voxel form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// Global Fisher trace and class-level CMP.
    Vision,
    /// Patch-averaged Fisher trace and argmax-odds CMP.
    Medical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub patch: PatchSpec,
    #[serde(default)]
    pub fisher_labels: FisherLabels,
}

impl PenaltyConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self { lambda1, lambda2, patch: PatchSpec::default(), fisher_labels: FisherLabels::Observed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return invalid(format!("penalty weights must be nonnegative, got ({}, {})", self.lambda1, self.lambda2));
        }
        Ok(())
    }
}

/// Values and gradients of both penalties at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEval {
    pub fip: f64,
    pub cmp: f64,
    pub fip_grad: Vec<f64>,
    pub cmp_grad: Vec<f64>,
    /// Gate pattern (indicators, argmax labels, clamps) the gradients were taken under.
    pub gates: Vec<u8>,
}

/// Per-sample CMP term from logits and `∂term/∂logits`, plus the gate bits used.
pub(crate) fn cmp_term_logits(form: PenaltyForm, z: &[f64], label: usize, gates: &mut Vec<u8>) -> (f64, Vec<f64>) {
    let k = z.len();
    let mut dz = vec![0.0; k];
    // odds of class c against the rest: exp(z_c − LSE_{j≠c} z_j), with its logit gradient
    let odds = |c: usize, dz: &mut [f64], weight: f64| -> f64 {
        let others: Vec<f64> = (0..k).filter(|j| *j != c).map(|j| z[j]).collect();
        let r = (z[c] - log_sum_exp(&others)).exp();
        let soft = softmax_unchecked(&others);
        dz[c] += weight * r;
        for (j, s) in (0..k).filter(|j| *j != c).zip(soft) {
            dz[j] -= weight * r * s;
        }
        r
    };
    match form {
        PenaltyForm::Vision => {
            let mut total = 0.0;
            for c in 0..k {
                let active = c != label && z[c] > z[label];
                gates.push(u8::from(active));
                if active {
                    total += odds(c, &mut dz, 1.0);
                }
            }
            (total, dz)
        }
        PenaltyForm::Medical => {
            let m = crate::math::argmax(z);
            gates.push(m as u8);
            let top = 1.0 - CMP_CLAMP_EPS;
            let cap = top / (1.0 - top);
            let mut probe = vec![0.0; k];
            let r = odds(m, &mut probe, 1.0);
            if r >= cap {
                gates.push(1);
                (cap, dz)
            } else {
                gates.push(0);
                (r, probe)
            }
        }
    }
}

/// Penalty values and gradients for a batch. `groups` partitions the samples
/// into patches for the Fisher average (one group = global Fisher).
pub fn evaluate_penalties(
    model: &ModelHandle,
    theta: &[f64],
    batch: &Batch,
    groups: &[Vec<usize>],
    form: PenaltyForm,
    fisher_labels: FisherLabels,
) -> Result<PenaltyEval> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return invalid("empty patch group");
    }
    let p = theta.len();
    let n = batch.len();
    let logits = model.logits_batch(theta, batch);
    let mut gates = Vec::new();

    let fisher_lab: Vec<usize> = match fisher_labels {
        FisherLabels::Observed => batch.labels.clone(),
        FisherLabels::Predicted => logits.iter().map(|z| crate::math::argmax(z)).collect(),
    };
    if fisher_labels == FisherLabels::Predicted {
        gates.extend(fisher_lab.iter().map(|v| *v as u8));
    }
    let mut fip = 0.0;
    let mut fip_grad = vec![0.0; p];
    for g in groups {
        let (t, gr) = fisher_trace_and_grad(model, theta, batch, g, &fisher_lab);
        fip += t;
        fip_grad.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
    }
    let ng = groups.len() as f64;
    fip /= ng;
    fip_grad.iter_mut().for_each(|v| *v /= ng);

    let mut cmp = 0.0;
    let mut cmp_grad = vec![0.0; p];
    for i in 0..n {
        let z = &logits[i];
        let (term, dz) = cmp_term_logits(form, z, batch.y(i), &mut gates);
        cmp += term;
        if dz.iter().any(|v| *v != 0.0) {
            let (_, acts) = model.forward_generic(theta, batch.x(i));
            let scaled: Vec<f64> = dz.iter().map(|v| v / n as f64).collect();
            model.backward_generic(theta, batch.x(i), &acts, &scaled, &mut cmp_grad);
        }
    }
    cmp /= n as f64;
    Ok(PenaltyEval { fip, cmp, fip_grad, cmp_grad, gates })
}

/// Gradient of `λ1·FIP + λ2·CMP` (classification form, global Fisher).
pub fn penalty_gradients(
    model: &ModelHandle,
    params: &ParamVector,
    batch: &Batch,
    config: &PenaltyConfig,
) -> Result<ParamVector> {
    config.validate()?;
    let all: Vec<usize> = (0..batch.len()).collect();
    let eval = evaluate_penalties(model, params.values(), batch, &[all], PenaltyForm::Vision, config.fisher_labels)?;
    let grad = eval
        .fip_grad
        .iter()
        .zip(&eval.cmp_grad)
        .map(|(f, c)| config.lambda1 * f + config.lambda2 * c)
        .collect();
    params.with_values(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::volume::Spacing;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cmp_class_examples() {
        assert_eq!(cmp_class(&pv(&[0.7, 0.2, 0.1]), 0).unwrap(), 0.0);
        let v = cmp_class(&pv(&[0.2, 0.7, 0.1]), 0).unwrap();
        assert!((v - 0.7 / 0.3).abs() < 1e-12);
        let v = cmp_class(&pv(&[0.25, 0.40, 0.35]), 0).unwrap();
        assert!((v - (0.40 / 0.60 + 0.35 / 0.65)).abs() < 1e-12);
        assert!(cmp_class(&pv(&[0.5, 0.5]), 2).is_err());
    }

    #[test]
    fn cmp_class_tie_does_not_fire() {
        assert_eq!(cmp_class(&pv(&[0.5, 0.5]), 0).unwrap(), 0.0);
        assert_eq!(cmp_class(&pv(&[0.4, 0.4, 0.2]), 1).unwrap(), 0.0);
    }

    #[test]
    fn cmp_vision_mean_and_errors() {
        let b = vec![pv(&[0.7, 0.2, 0.1]), pv(&[0.2, 0.7, 0.1]), pv(&[0.25, 0.40, 0.35])];
        let c = cmp_vision(&b, &[0, 0, 0]).unwrap();
        let expect = (0.0 + 0.7 / 0.3 + 0.40 / 0.60 + 0.35 / 0.65) / 3.0;
        assert!((c.value - expect).abs() < 1e-12);
        assert!(cmp_vision(&[], &[]).is_err());
        let single = cmp_vision(&b[1..2], &[0]).unwrap();
        assert_eq!(single.value, cmp_class(&b[1], 0).unwrap());
        let good = cmp_vision(&[pv(&[0.9, 0.1]), pv(&[0.2, 0.8])], &[0, 1]).unwrap();
        assert_eq!(good.value, 0.0);
    }

    #[test]
    fn cmp_voxel_examples() {
        let d = Dims::new(2, 1, 1);
        let half = ProbVolume::new(d, Spacing::default(), vec![0.5, 0.5]).unwrap();
        assert_eq!(cmp_voxel_argmax(&half).unwrap().value, 1.0);
        let p = ProbVolume::new(d, Spacing::default(), vec![0.9, 0.2]).unwrap();
        assert!((cmp_voxel_argmax(&p).unwrap().value - 6.5).abs() < 1e-12);
        let sat = ProbVolume::new(d, Spacing::default(), vec![1.0, 0.3]).unwrap();
        let v = cmp_voxel_argmax(&sat).unwrap().value;
        assert!(v.is_finite());
        let top = 1.0 - CMP_CLAMP_EPS;
        let cap = top / (1.0 - top);
        assert!((v - (cap + 0.7 / 0.3) / 2.0).abs() < 1e-9);
        let wrong = MaskVolume::zeros(Dims::new(3, 1, 1), Spacing::default());
        assert!(cmp_voxel(&p, &wrong).is_err());
    }

    #[test]
    fn patches_tile_and_drop_partials() {
        let t = PatchSpec::new(16, 16).unwrap().tile(Dims::cube(32)).unwrap();
        assert_eq!(t.len(), 8);
        let t = PatchSpec::new(16, 16).unwrap().tile(Dims::new(40, 16, 16)).unwrap();
        assert_eq!(t.len(), 2);
        assert!(PatchSpec::new(16, 16).unwrap().tile(Dims::cube(15)).is_err());
        assert!(PatchSpec::new(0, 1).is_err());
        let t = PatchSpec::new(2, 1).unwrap().tile(Dims::cube(3)).unwrap();
        assert_eq!(t.len(), 8);
    }

    #[test]
    fn zero_score_model_has_zero_fisher() {
        struct Flat;
        impl ScoreModel for Flat {
            fn num_params(&self) -> usize {
                3
            }
            fn score<T: Real>(&self, _t: &[T], _x: &[f64], _y: usize) -> Vec<T> {
                vec![T::zero(); 3]
            }
        }
        let params = ParamVector::single("head", vec![0.1, 0.2, 0.3]).unwrap();
        let batch = Batch::new(1, vec![1.0, 2.0], vec![0, 1]).unwrap();
        let f = fisher_global(&Flat, &params, &batch).unwrap();
        assert_eq!(f.scalar, 0.0);
        assert!(f.matrix.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fisher_scalar_matches_segments_and_matrix_trace() {
        let m = ModelHandle::two_tower(3, 2, 2, 0.5, 4).unwrap();
        let mut rng = RngState::new(5);
        let batch = Batch::new(3, (0..30).map(|_| rng.next_normal()).collect(), (0..10).map(|i| i % 2).collect())
            .unwrap();
        let f = fisher_vision(&m, &m.params, &batch).unwrap();
        let seg: f64 = f.per_segment.values().sum();
        assert!((f.scalar - seg).abs() < 1e-9);
        let mat = f.matrix.as_ref().unwrap();
        let p = m.num_params();
        let tr: f64 = (0..p).map(|i| mat[i * p + i]).sum();
        assert!((tr - f.scalar).abs() < 1e-6);
    }

    #[test]
    fn fisher_vision_requires_segments() {
        let m = ModelHandle::linear_softmax(2, 2, 1).unwrap();
        let batch = Batch::new(2, vec![1.0, 0.0], vec![0]).unwrap();
        assert!(matches!(fisher_vision(&m, &m.params, &batch), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_lambdas_zero_gradient() {
        let m = ModelHandle::mlp1(3, 4, 3, 2).unwrap();
        let batch = Batch::new(3, vec![0.1, 0.2, -0.3, 1.0, 0.0, -1.0], vec![2, 1]).unwrap();
        let g = penalty_gradients(&m, &m.params, &batch, &PenaltyConfig::new(0.0, 0.0)).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
        assert!(penalty_gradients(&m, &m.params, &batch, &PenaltyConfig::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn inactive_cmp_contributes_nothing() {
        // Large correct-class bias: every sample is predicted correctly.
        let mut w = vec![0.0; 2 * 2 + 2];
        w[4] = 5.0;
        let m = ModelHandle::from_values(
            crate::models::ModelKind::LinearSoftmax,
            crate::models::ModelDims { input: 2, hidden: 0, classes: 2 },
            1.0,
            w,
        )
        .unwrap();
        let batch = Batch::new(2, vec![0.3, 0.1, -0.2, 0.4], vec![0, 0]).unwrap();
        let e = evaluate_penalties(&m, m.params.values(), &batch, &[vec![0, 1]], PenaltyForm::Vision, FisherLabels::Observed)
            .unwrap();
        assert_eq!(e.cmp, 0.0);
        assert!(e.cmp_grad.iter().all(|v| *v == 0.0));
    }
}
