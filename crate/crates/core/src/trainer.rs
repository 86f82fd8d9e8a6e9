//! Deterministic minibatch training on the composite objectives and λ sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{eval_ece_bound, eval_risk_bound, EceBoundReport, RiskBoundReport, RiskLoss};
use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::losses::{loss_medical_groups, loss_vision, LossBreakdown};
use crate::math::ProbVector;
use crate::metrics::{
    accuracy, brier_classes, classification_calibration, cross_site_variance, dgg, seg_report, voxel_ece,
    CalibrationReport, DomainReport, VoxelConfidence, DEFAULT_BINS,
};
use crate::models::{ModelHandle, ModelKind};
use crate::penalties::{cmp_vision, voxel_batch, FisherLabels, PatchSpec, PenaltyConfig};
use crate::rng::RngState;
use crate::shiftgen::{LabeledVolume, ShiftedDataset, SyntheticVolumeSet};
use crate::volume::{Dims, ProbVolume};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default)]
    pub seed: u64,
    /// Record held-out metrics every this many epochs (0 disables).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub patch: PatchSpec,
    #[serde(default)]
    pub fisher_labels: FisherLabels,
}

impl TrainConfig {
    pub fn new(epochs: usize, lambda1: f64, lambda2: f64, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs,
            lambda1,
            lambda2,
            seed,
            eval_every: 0,
            ece_bins: DEFAULT_BINS,
            patch: PatchSpec::default(),
            fisher_labels: FisherLabels::Observed,
        }
    }

    /// λ1 = 0.4, λ2 = 0.5.
    pub fn vision_defaults(epochs: usize, seed: u64) -> Self {
        Self::new(epochs, 0.4, 0.5, seed)
    }

    /// λ1 = 0.3, λ2 = 0.5.
    pub fn medical_defaults(epochs: usize, seed: u64) -> Self {
        Self::new(epochs, 0.3, 0.5, seed)
    }

    pub fn penalty(&self) -> PenaltyConfig {
        PenaltyConfig { lambda1: self.lambda1, lambda2: self.lambda2, patch: self.patch, fisher_labels: self.fisher_labels }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be a nonnegative finite number, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be at least 1".into()));
        }
        PatchSpec::new(self.patch.edge, self.patch.stride).map_err(|e| Error::Config(e.to_string()))?;
        self.penalty().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// First-order optimizer with isolated state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        Optimizer { kind, lr, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    theta[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Vision,
    Medical,
}

/// Segmentation data: training volumes from the source site, evaluation
/// volumes per site (site 0 is the source).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationData {
    pub train: Vec<LabeledVolume>,
    pub eval_sites: Vec<Vec<LabeledVolume>>,
}

impl SegmentationData {
    /// The first `n_train` site-0 volumes train; the remaining site-0 volumes
    /// and every other site evaluate.
    pub fn split(set: &SyntheticVolumeSet, n_train: usize) -> Result<Self> {
        let src = set.sites.first().ok_or_else(|| Error::InvalidInput("no sites".into()))?;
        if n_train == 0 || n_train >= src.len() {
            return invalid(format!("need 1 ≤ n_train < {} source volumes, got {n_train}", src.len()));
        }
        let mut eval_sites = vec![src[n_train..].to_vec()];
        eval_sites.extend(set.sites[1..].iter().cloned());
        Ok(SegmentationData { train: src[..n_train].to_vec(), eval_sites })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Classification(&'a ShiftedDataset),
    Segmentation(&'a SegmentationData),
}

impl TrainData<'_> {
    pub fn task(&self) -> Task {
        match self {
            TrainData::Classification(_) => Task::Vision,
            TrainData::Segmentation(_) => Task::Medical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub brier: f64,
    pub cmp: f64,
    pub calibration: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub source: SplitMetrics,
    pub target: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub site: usize,
    pub volumes: usize,
    /// Mean per-volume DSC.
    pub dsc: f64,
    /// Mean per-volume HD95 over volumes where it is defined.
    pub hd95: Option<f64>,
    pub hd95_undefined: usize,
    /// ECE over the pooled voxels of the site.
    pub ece_voxel: f64,
    pub cmp_3d: f64,
    pub brier: f64,
    pub calibration: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub sites: Vec<SiteMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    /// Source accuracy or mean source DSC.
    pub source: f64,
    /// Target accuracy or mean DSC over the other sites.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub model_kind: ModelKind,
    pub seed: u64,
    pub config: TrainConfig,
    /// Mean minibatch objective per epoch.
    pub loss_curve: Vec<f64>,
    pub eval_curve: Vec<EvalPoint>,
    pub classification: Option<ClassificationMetrics>,
    pub segmentation: Option<SegmentationMetrics>,
    pub domain: DomainReport,
    pub risk_bound: Option<RiskBoundReport>,
    /// One per evaluation volume, site-major.
    pub ece_bounds: Vec<EceBoundReport>,
}

impl RunReport {
    /// Headline quality: target accuracy, or mean DSC over non-source sites
    /// (the source site when it is the only one).
    pub fn target_quality(&self) -> f64 {
        if let Some(c) = &self.classification {
            return c.target.accuracy;
        }
        let s = &self.segmentation.as_ref().expect("one metric block is always set").sites;
        target_mean(s, |m| m.dsc)
    }

    pub fn target_ece(&self) -> f64 {
        if let Some(c) = &self.classification {
            return c.target.ece;
        }
        let s = &self.segmentation.as_ref().expect("one metric block is always set").sites;
        target_mean(s, |m| m.ece_voxel)
    }

    pub fn target_hd95(&self) -> Option<f64> {
        let s = &self.segmentation.as_ref()?.sites;
        let tgt: Vec<f64> = if s.len() > 1 { &s[1..] } else { &s[..] }.iter().filter_map(|m| m.hd95).collect();
        (!tgt.is_empty()).then(|| tgt.iter().sum::<f64>() / tgt.len() as f64)
    }
}

fn target_mean(sites: &[SiteMetrics], f: impl Fn(&SiteMetrics) -> f64) -> f64 {
    let tgt = if sites.len() > 1 { &sites[1..] } else { sites };
    tgt.iter().map(f).sum::<f64>() / tgt.len() as f64
}

/// A finished run: the report and the trained model.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: ModelHandle,
}

struct VoxelSample {
    batch: Batch,
    groups: Vec<Vec<usize>>,
}

fn prepare_volumes(vols: &[LabeledVolume], patch: PatchSpec) -> Result<Vec<VoxelSample>> {
    vols.iter()
        .map(|v| {
            Ok(VoxelSample { batch: voxel_batch(&v.image, &v.mask)?, groups: patch.tile(v.image.dims)? })
        })
        .collect()
}

fn mean_breakdown(parts: Vec<LossBreakdown>) -> LossBreakdown {
    let k = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("nonempty minibatch");
    for p in it {
        acc.base += p.base;
        acc.fip += p.fip;
        acc.cmp += p.cmp;
        acc.total += p.total;
        acc.grad.iter_mut().zip(&p.grad).for_each(|(a, b)| *a += b);
        acc.gates.extend(p.gates);
    }
    acc.base /= k;
    acc.fip /= k;
    acc.cmp /= k;
    acc.total /= k;
    acc.grad.iter_mut().for_each(|g| *g /= k);
    acc
}

/// Objective of a segmentation minibatch: mean over its volumes.
fn medical_minibatch(model: &ModelHandle, theta: &[f64], samples: &[&VoxelSample], cfg: &PenaltyConfig) -> Result<LossBreakdown> {
    let parts = samples
        .iter()
        .map(|s| loss_medical_groups(model, theta, &s.batch, &s.groups, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_breakdown(parts))
}

fn check_model(model: &ModelHandle, data: &TrainData) -> Result<()> {
    match data {
        TrainData::Classification(ds) => {
            if ds.source.is_empty() || ds.target.is_empty() {
                return invalid("dataset splits must be nonempty");
            }
            if model.kind == ModelKind::VoxelLinear {
                return Err(Error::Config("voxel_linear is a segmentation model".into()));
            }
            if ds.source.dim != model.input_dim() || ds.spec.classes != model.classes() {
                return Err(Error::Config(format!(
                    "model expects {} features and {} classes, dataset has {} and {}",
                    model.input_dim(),
                    model.classes(),
                    ds.source.dim,
                    ds.spec.classes
                )));
            }
        }
        TrainData::Segmentation(sd) => {
            if model.kind != ModelKind::VoxelLinear {
                return Err(Error::Config("segmentation needs a voxel_linear model".into()));
            }
            if sd.train.is_empty() || sd.eval_sites.is_empty() || sd.eval_sites.iter().any(|s| s.is_empty()) {
                return invalid("segmentation data needs training volumes and nonempty evaluation sites");
            }
        }
    }
    Ok(())
}

/// Minibatch optimization of the composite objective with a fixed epoch budget.
pub fn train(model: &ModelHandle, data: TrainData, config: &TrainConfig) -> Result<TrainedRun> {
    config.validate()?;
    check_model(model, &data)?;
    let cfg = config.penalty();
    let mut theta = model.params.values().to_vec();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, theta.len());
    let voxels = match data {
        TrainData::Segmentation(sd) => prepare_volumes(&sd.train, config.patch)?,
        TrainData::Classification(_) => Vec::new(),
    };
    let n = match data {
        TrainData::Classification(ds) => ds.source.len(),
        TrainData::Segmentation(_) => voxels.len(),
    };
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut eval_curve = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        RngState::stream(config.seed, 0x7368_7566 + epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let res = match data {
                TrainData::Classification(ds) => loss_vision(model, &theta, &ds.source.gather(chunk), &cfg)?,
                TrainData::Segmentation(_) => {
                    let picked: Vec<&VoxelSample> = chunk.iter().map(|i| &voxels[*i]).collect();
                    medical_minibatch(model, &theta, &picked, &cfg)?
                }
            };
            if !res.total.is_finite() || res.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss: res.total });
            }
            opt.step(&mut theta, &res.grad);
            epoch_loss += res.total;
            batches += 1;
            step += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
            let snapshot = model.with_params(model.params.with_values(theta.clone())?)?;
            eval_curve.push(eval_point(&snapshot, &data, epoch + 1)?);
        }
    }
    let trained = model.with_params(model.params.with_values(theta)?)?;
    if trained.params.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { epoch: config.epochs, step, loss: f64::NAN });
    }
    let report = evaluate(&trained, &data, config, loss_curve, eval_curve)?;
    Ok(TrainedRun { report, model: trained })
}

fn probs_of(model: &ModelHandle, batch: &Batch) -> Result<Vec<ProbVector>> {
    model.predict_proba(batch)?.into_iter().map(ProbVector::new).collect()
}

fn split_metrics(model: &ModelHandle, batch: &Batch, bins: usize) -> Result<SplitMetrics> {
    let probs = probs_of(model, batch)?;
    let calibration = classification_calibration(&probs, &batch.labels, bins)?;
    Ok(SplitMetrics {
        n: batch.len(),
        accuracy: accuracy(&probs, &batch.labels)?,
        ece: calibration.ece,
        brier: brier_classes(&probs, &batch.labels)?,
        cmp: cmp_vision(&probs, &batch.labels)?.value,
        calibration,
    })
}

fn pooled(volumes: &[ProbVolume]) -> Result<ProbVolume> {
    let data: Vec<f64> = volumes.iter().flat_map(|v| v.data.iter().copied()).collect();
    ProbVolume::new(Dims::new(data.len(), 1, 1), volumes[0].spacing, data)
}

fn site_metrics(model: &ModelHandle, site: usize, vols: &[LabeledVolume], bins: usize, bounds: &mut Vec<EceBoundReport>) -> Result<SiteMetrics> {
    let preds = vols.iter().map(|v| model.forward_segmenter(&v.image)).collect::<Result<Vec<_>>>()?;
    let mut dsc = 0.0;
    let mut hd = Vec::new();
    for (p, v) in preds.iter().zip(vols) {
        let r = seg_report(p, &v.mask, bins)?;
        dsc += r.dsc;
        hd.extend(r.hd95);
        bounds.push(eval_ece_bound(p, &v.mask, bins)?);
    }
    let all_p = pooled(&preds)?;
    let truth_data: Vec<u8> = vols.iter().flat_map(|v| v.mask.data.iter().copied()).collect();
    let truth = crate::volume::MaskVolume::new(all_p.dims, all_p.spacing, truth_data)?;
    let calibration = voxel_ece(&all_p, &truth, bins, VoxelConfidence::Argmax)?;
    Ok(SiteMetrics {
        site,
        volumes: vols.len(),
        dsc: dsc / vols.len() as f64,
        hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
        hd95_undefined: vols.len() - hd.len(),
        ece_voxel: calibration.ece,
        cmp_3d: crate::penalties::cmp_voxel_argmax(&all_p)?.value,
        brier: crate::metrics::brier_volume(&all_p, &truth)?,
        calibration,
    })
}

fn eval_point(model: &ModelHandle, data: &TrainData, epoch: usize) -> Result<EvalPoint> {
    match data {
        TrainData::Classification(ds) => Ok(EvalPoint {
            epoch,
            source: accuracy(&probs_of(model, &ds.source)?, &ds.source.labels)?,
            target: accuracy(&probs_of(model, &ds.target)?, &ds.target.labels)?,
        }),
        TrainData::Segmentation(sd) => {
            let mut sink = Vec::new();
            let sites = sd
                .eval_sites
                .iter()
                .enumerate()
                .map(|(i, v)| site_metrics(model, i, v, DEFAULT_BINS, &mut sink))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalPoint { epoch, source: sites[0].dsc, target: target_mean(&sites, |m| m.dsc) })
        }
    }
}

fn evaluate(
    model: &ModelHandle,
    data: &TrainData,
    config: &TrainConfig,
    loss_curve: Vec<f64>,
    eval_curve: Vec<EvalPoint>,
) -> Result<RunReport> {
    let bins = config.ece_bins;
    let mut report = RunReport {
        task: data.task(),
        model_kind: model.kind,
        seed: config.seed,
        config: config.clone(),
        loss_curve,
        eval_curve,
        classification: None,
        segmentation: None,
        domain: DomainReport { dgg: 0.0, cross_site_std: 0.0 },
        risk_bound: None,
        ece_bounds: Vec::new(),
    };
    match data {
        TrainData::Classification(ds) => {
            let source = split_metrics(model, &ds.source, bins)?;
            let target = split_metrics(model, &ds.target, bins)?;
            report.domain = DomainReport {
                dgg: dgg(source.accuracy, target.accuracy)?,
                cross_site_std: cross_site_variance(&[source.accuracy, target.accuracy])?,
            };
            report.risk_bound = Some(eval_risk_bound(model, &model.params, ds, RiskLoss::CrossEntropy)?);
            report.classification = Some(ClassificationMetrics { source, target });
        }
        TrainData::Segmentation(sd) => {
            let mut bounds = Vec::new();
            let sites = sd
                .eval_sites
                .iter()
                .enumerate()
                .map(|(i, v)| site_metrics(model, i, v, bins, &mut bounds))
                .collect::<Result<Vec<_>>>()?;
            let dsc: Vec<f64> = sites.iter().map(|s| s.dsc).collect();
            report.domain = DomainReport {
                dgg: dsc[0] - target_mean(&sites, |m| m.dsc),
                cross_site_std: if dsc.len() >= 2 { cross_site_variance(&dsc)? } else { 0.0 },
            };
            report.ece_bounds = bounds;
            report.segmentation = Some(SegmentationMetrics { sites });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Each axis varied with the other pinned to 0.
    #[default]
    OneAxis,
    /// Every (λ1, λ2) pair.
    FullGrid,
}

fn default_axis() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "default_axis")]
    pub lambda1_values: Vec<f64>,
    #[serde(default = "default_axis")]
    pub lambda2_values: Vec<f64>,
    #[serde(default)]
    pub mode: SweepMode,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid { lambda1_values: default_axis(), lambda2_values: default_axis(), mode: SweepMode::OneAxis }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1_values", &self.lambda1_values), ("lambda2_values", &self.lambda2_values)] {
            if v.is_empty() {
                return Err(Error::Config(format!("{name} must be nonempty")));
            }
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("{name} must hold nonnegative finite values")));
            }
            if v.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config(format!("{name} must be sorted ascending")));
            }
        }
        Ok(())
    }

    /// Grid points in sweep order. The one-axis protocol lists the λ1 axis
    /// (λ2 = 0) and then the λ2 axis (λ1 = 0), skipping repeated points.
    pub fn points(&self) -> Vec<(f64, f64)> {
        match self.mode {
            SweepMode::FullGrid => self
                .lambda1_values
                .iter()
                .flat_map(|a| self.lambda2_values.iter().map(move |b| (*a, *b)))
                .collect(),
            SweepMode::OneAxis => {
                let mut pts: Vec<(f64, f64)> = self.lambda1_values.iter().map(|a| (*a, 0.0)).collect();
                for b in &self.lambda2_values {
                    if !pts.contains(&(0.0, *b)) {
                        pts.push((0.0, *b));
                    }
                }
                pts
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub outcome: std::result::Result<RunReport, Error>,
}

/// One summary line of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Target accuracy (vision) or mean target-site DSC (medical).
    pub quality: Option<f64>,
    pub ece: Option<f64>,
    pub hd95: Option<f64>,
    pub dgg: Option<f64>,
    /// `ok` or the failure message.
    pub status: String,
}

impl SweepRow {
    pub fn summary(&self) -> SweepSummaryRow {
        match &self.outcome {
            Ok(r) => SweepSummaryRow {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                quality: Some(r.target_quality()),
                ece: Some(r.target_ece()),
                hd95: r.target_hd95(),
                dgg: Some(r.domain.dgg),
                status: "ok".into(),
            },
            Err(e) => SweepSummaryRow {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                quality: None,
                ece: None,
                hd95: None,
                dgg: None,
                status: format!("failed: {e}"),
            },
        }
    }
}

/// One training run per grid point from the same initial model and seed.
/// Points run in parallel (each with its own optimizer state) and come back
/// in grid order; a failing point is recorded without stopping the sweep.
pub fn sweep(model: &ModelHandle, data: TrainData, grid: &SweepGrid, base: &TrainConfig) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    base.validate()?;
    check_model(model, &data)?;
    let rows = grid
        .points()
        .into_par_iter()
        .map(|(l1, l2)| {
            let cfg = TrainConfig { lambda1: l1, lambda2: l2, ..base.clone() };
            SweepRow { lambda1: l1, lambda2: l2, outcome: train(model, data, &cfg).map(|r| r.report) }
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shiftgen::{gen_classification, ShiftKind, ShiftSpec};

    fn small_data(seed: u64) -> ShiftedDataset {
        gen_classification(&ShiftSpec::new(ShiftKind::MeanShift, 1.0, 120, 80, 2, 3, seed)).unwrap()
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.1, 3);
            let mut theta = vec![0.5, -1.0, 2.0];
            opt.step(&mut theta, &[0.0; 3]);
            assert_eq!(theta, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = small_data(1);
        let m = ModelHandle::linear_softmax(3, 2, 4).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::vision_defaults(3, 2) };
        let run = train(&m, TrainData::Classification(&ds), &cfg).unwrap();
        assert_eq!(run.model.params, m.params);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(2);
        let m = ModelHandle::mlp1(3, 4, 2, 4).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, ..TrainConfig::vision_defaults(4, 9) };
        let a = train(&m, TrainData::Classification(&ds), &cfg).unwrap();
        let b = train(&m, TrainData::Classification(&ds), &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn one_axis_points_skip_duplicates() {
        let g = SweepGrid { lambda1_values: default_axis(), lambda2_values: vec![0.0], mode: SweepMode::OneAxis };
        assert_eq!(g.points().len(), 6);
        assert_eq!(SweepGrid::default().points().len(), 11);
        let full = SweepGrid { mode: SweepMode::FullGrid, ..SweepGrid::default() };
        assert_eq!(full.points().len(), 36);
        let bad = SweepGrid { lambda1_values: vec![0.4, 0.2], ..SweepGrid::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_reports_the_step() {
        let ds = small_data(3);
        let m = ModelHandle::linear_softmax(3, 2, 4).unwrap();
        let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, learning_rate: 1.0, ..TrainConfig::new(5, 1e308, 0.0, 1) };
        match train(&m, TrainData::Classification(&ds), &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
