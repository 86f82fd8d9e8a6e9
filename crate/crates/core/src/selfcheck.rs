//! Randomized fast-path versus oracle comparisons, shared by `starfm check`
//! and the acceptance suite.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_at, GradCheckReport};
use crate::losses::{loss_medical_groups, loss_vision};
use crate::math::ProbVector;
use crate::metrics;
use crate::models::{ModelDims, ModelHandle, ModelKind};
use crate::oracle;
use crate::penalties::{self, PatchSpec, PenaltyConfig, CMP_CLAMP_EPS};
use crate::rng::RngState;
use crate::volume::{Dims, MaskVolume, ProbVolume, Spacing, VolumeGrid};

/// Relative tolerance for floating metrics.
pub const FLOAT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    /// Largest relative discrepancy seen (0 for exact checks that agreed).
    pub worst: f64,
    /// First mismatching instance, if any.
    pub first_failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

struct Tally {
    name: &'static str,
    instances: usize,
    mismatches: usize,
    worst: f64,
    first_failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally { name, instances: 0, mismatches: 0, worst: 0.0, first_failure: None }
    }

    fn record(&mut self, ok: bool, discrepancy: f64, describe: impl FnOnce() -> String) {
        self.instances += 1;
        self.worst = self.worst.max(discrepancy);
        if !ok {
            self.mismatches += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name,
            instances: self.instances,
            mismatches: self.mismatches,
            worst: self.worst,
            first_failure: self.first_failure,
        }
    }
}

fn small_dims(rng: &mut RngState, lo: u64, hi: u64) -> Dims {
    let mut d = || (lo + rng.below(hi - lo + 1)) as usize;
    Dims::new(d(), d(), d())
}

fn random_mask(rng: &mut RngState, dims: Dims, density: f64) -> MaskVolume {
    let data = (0..dims.len()).map(|_| u8::from(rng.next_uniform() < density)).collect();
    MaskVolume { dims, spacing: Spacing::default(), data }
}

fn random_probs(rng: &mut RngState, k: usize) -> Vec<f64> {
    let scale = rng.uniform_range(0.1, 6.0);
    let mut z: Vec<f64> = (0..k).map(|_| scale * rng.next_normal()).collect();
    if rng.below(4) == 0 {
        // exact tie between two classes
        let a = rng.below(k as u64) as usize;
        let b = rng.below(k as u64) as usize;
        z[a] = z[b];
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn check_cmp_class(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = RngState::stream(seed, 0xc1);
    let mut t = Tally::new("cmp_class");
    for _ in 0..instances {
        let k = 2 + rng.below(5) as usize;
        let p = random_probs(&mut rng, k);
        let y = rng.below(k as u64) as usize;
        let want = oracle::cmp_class(&p, y);
        let got = ProbVector::new(p.clone()).and_then(|pv| penalties::cmp_class(&pv, y));
        match got {
            Ok(v) => {
                let r = rel(v, want);
                t.record(r < FLOAT_RTOL, r, || format!("probs {p:?} label {y}: fast {v} oracle {want}"));
            }
            Err(e) => t.record(false, f64::INFINITY, || format!("probs {p:?} label {y}: {e}")),
        }
    }
    t.finish()
}

pub fn check_cmp_voxel(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = RngState::stream(seed, 0xc2);
    let mut t = Tally::new("cmp_voxel");
    for _ in 0..instances {
        let dims = small_dims(&mut rng, 1, 6);
        let data: Vec<f64> = (0..dims.len())
            .map(|_| match rng.below(5) {
                0 => 1.0 - rng.next_uniform() * 2e-6,
                1 => rng.next_uniform() * 2e-6,
                _ => rng.next_uniform(),
            })
            .collect();
        let probs = ProbVolume { dims, spacing: Spacing::default(), data };
        let labels = if rng.below(2) == 0 { probs.predicted_mask() } else { random_mask(&mut rng, dims, 0.5) };
        let want = oracle::cmp_voxel(&probs, &labels, CMP_CLAMP_EPS);
        match penalties::cmp_voxel(&probs, &labels) {
            Ok(v) => {
                let r = rel(v.value, want);
                t.record(r < FLOAT_RTOL, r, || format!("dims {:?}: fast {} oracle {want}", dims.as_array(), v.value));
            }
            Err(e) => t.record(false, f64::INFINITY, || e.to_string()),
        }
    }
    t.finish()
}

pub fn check_ece(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = RngState::stream(seed, 0xc3);
    let mut t = Tally::new("ece");
    for _ in 0..instances {
        let bins = 1 + rng.below(15) as usize;
        let n = 1 + rng.below(200) as usize;
        let conf: Vec<f64> = (0..n)
            .map(|_| match rng.below(6) {
                // land exactly on bin edges, including 1.0
                0 => rng.below(bins as u64 + 1) as f64 / bins as f64,
                _ => rng.next_uniform(),
            })
            .collect();
        let correct: Vec<bool> = conf.iter().map(|c| rng.next_uniform() < *c).collect();
        let (want_bins, want) = oracle::ece(&conf, &correct, bins);
        match metrics::ece(&conf, &correct, bins) {
            Ok(rep) => {
                let counts_match = rep.bins.iter().zip(&want_bins).all(|(b, w)| b.count == w.0);
                let stats_match = rep
                    .bins
                    .iter()
                    .zip(&want_bins)
                    .all(|(b, w)| b.count == 0 || (rel(b.mean_confidence, w.1) < FLOAT_RTOL && rel(b.accuracy, w.2) < FLOAT_RTOL));
                let r = rel(rep.ece, want);
                t.record(counts_match && stats_match && r < FLOAT_RTOL, r, || {
                    format!("n {n} bins {bins}: fast {} oracle {want}, counts match {counts_match}", rep.ece)
                });
            }
            Err(e) => t.record(false, f64::INFINITY, || e.to_string()),
        }
    }
    t.finish()
}

pub fn check_dsc(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = RngState::stream(seed, 0xc4);
    let mut t = Tally::new("dsc");
    for _ in 0..instances {
        let dims = small_dims(&mut rng, 1, 7);
        let da = [0.0, 0.05, 0.3, 0.7][rng.below(4) as usize];
        let db = [0.0, 0.05, 0.3, 0.7][rng.below(4) as usize];
        let a = random_mask(&mut rng, dims, da);
        let b = random_mask(&mut rng, dims, db);
        let want = oracle::dsc(&a, &b);
        match metrics::dsc(&a, &b) {
            Ok(v) => t.record(v.to_bits() == want.to_bits(), rel(v, want), || format!("fast {v} oracle {want}")),
            Err(e) => t.record(false, f64::INFINITY, || e.to_string()),
        }
    }
    t.finish()
}

pub fn check_hd95(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = RngState::stream(seed, 0xc5);
    let mut t = Tally::new("hd95");
    for _ in 0..instances {
        let dims = small_dims(&mut rng, 1, 7);
        let spacing = Spacing([0; 3].map(|_| [0.5, 1.0, 1.5, 2.5][rng.below(4) as usize]));
        let da = [0.0, 0.1, 0.4][rng.below(3) as usize];
        let mut a = random_mask(&mut rng, dims, da);
        let mut b = random_mask(&mut rng, dims, 0.3);
        a.spacing = spacing;
        b.spacing = spacing;
        let want = oracle::hd95(&a, &b);
        match (metrics::hd95(&a, &b), want) {
            (Ok(v), Some(w)) => {
                let r = rel(v, w);
                t.record(r < FLOAT_RTOL, r, || format!("dims {:?}: fast {v} oracle {w}", dims.as_array()));
            }
            (Err(Error::UndefinedMetric(_)), None) => t.record(true, 0.0, String::new),
            (got, w) => t.record(false, f64::INFINITY, || format!("fast {got:?} oracle {w:?}")),
        }
    }
    t.finish()
}

pub fn check_fisher_3d(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = RngState::stream(seed, 0xc6);
    let mut t = Tally::new("fisher_3d");
    for i in 0..instances {
        let dims = small_dims(&mut rng, 3, 7);
        let edge = 2 + rng.below(2) as usize;
        let stride = 1 + rng.below(3) as usize;
        let data: Vec<f32> = (0..dims.len()).map(|_| rng.next_normal() as f32).collect();
        let v = VolumeGrid { dims, spacing: Spacing::default(), data };
        let labels = random_mask(&mut rng, dims, 0.3);
        let w = [0; 4].map(|_| rng.uniform_range(-2.0, 2.0));
        let model = match ModelHandle::voxel_linear(i as u64).and_then(|m| {
            let p = m.params.with_values(w.to_vec())?;
            m.with_params(p)
        }) {
            Ok(m) => m,
            Err(e) => {
                t.record(false, f64::INFINITY, || e.to_string());
                continue;
            }
        };
        let want = oracle::fisher_3d_voxel_linear(&w, &v, &labels, edge, stride).expect("dims ≥ edge");
        match penalties::fisher_3d(&model, &model.params, &v, &labels, PatchSpec { edge, stride }) {
            Ok(f) => {
                let r = rel(f.scalar, want);
                t.record(r < FLOAT_RTOL, r, || {
                    format!("dims {:?} patch {edge}/{stride} w {w:?}: fast {} oracle {want}", dims.as_array(), f.scalar)
                });
            }
            Err(e) => t.record(false, f64::INFINITY, || e.to_string()),
        }
    }
    t.finish()
}

/// Every oracle comparison with `instances` random cases each.
pub fn oracle_suite(instances: usize, seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_cmp_class(instances, seed),
        check_cmp_voxel(instances, seed),
        check_ece(instances, seed),
        check_dsc(instances, seed),
        check_hd95(instances, seed),
        check_fisher_3d(instances, seed),
    ]
}

/// Relative-error threshold of the gradient checks.
pub const GRAD_RTOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy or contrastive base plus the classification penalties.
    Vision,
    /// Dice + BCE base plus the voxel penalties over two sample groups.
    Medical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientOutcome {
    pub model: ModelKind,
    pub objective: Objective,
    pub instances: usize,
    pub report: GradCheckReport,
}

impl GradientOutcome {
    pub fn passed(&self, min_checked: usize) -> bool {
        self.report.checked_coordinates >= min_checked && self.report.max_relative_error < GRAD_RTOL
    }
}

fn random_instance(kind: ModelKind, objective: Objective, rng: &mut RngState) -> Result<(ModelHandle, Batch)> {
    let classes = if objective == Objective::Medical || kind == ModelKind::VoxelLinear { 2 } else { 3 };
    let dims = ModelDims { input: 3, hidden: 4, classes };
    let fresh = ModelHandle::new(kind, dims, 0.5, rng.next_u64())?;
    // scale up so predictions are confident enough to switch CMP terms on
    let gain = rng.uniform_range(0.5, 4.0);
    let values = fresh.params.values().iter().map(|v| gain * v).collect();
    let model = fresh.with_params(fresh.params.with_values(values)?)?;
    let n = 8;
    let features = (0..n * 3).map(|_| rng.next_normal()).collect();
    let labels = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
    Ok((model, Batch::new(3, features, labels)?))
}

/// Central-difference checks of one model under one composite objective,
/// drawing random instances until `coordinates` coordinates were compared.
pub fn check_gradient(kind: ModelKind, objective: Objective, coordinates: usize, seed: u64) -> Result<GradientOutcome> {
    let mut rng = RngState::stream(seed, 0x6772 + kind.code() as u64 * 2 + objective as u64);
    let mut total = GradCheckReport { max_relative_error: 0.0, checked_coordinates: 0, skipped_coordinates: 0, step: crate::gradcheck::FD_STEP };
    let mut instances = 0;
    while total.checked_coordinates < coordinates && instances < 10 * coordinates {
        let (model, batch) = random_instance(kind, objective, &mut rng)?;
        let per = 10.min(coordinates - total.checked_coordinates);
        let r = match objective {
            Objective::Vision => {
                let cfg = PenaltyConfig::new(0.4, 0.5);
                finite_diff_check_at(model.params.values(), |t| Ok(loss_vision(&model, t, &batch, &cfg)?.into()), per, rng.next_u64())?
            }
            Objective::Medical => {
                let cfg = PenaltyConfig::new(0.3, 0.5);
                let groups = vec![(0..4).collect(), (4..8).collect()];
                finite_diff_check_at(
                    model.params.values(),
                    |t| Ok(loss_medical_groups(&model, t, &batch, &groups, &cfg)?.into()),
                    per,
                    rng.next_u64(),
                )?
            }
        };
        total.merge(&r);
        instances += 1;
    }
    Ok(GradientOutcome { model: kind, objective, instances, report: total })
}

/// Every model under both objectives.
pub fn gradient_suite(coordinates: usize, seed: u64) -> Result<Vec<GradientOutcome>> {
    let kinds = [ModelKind::LinearSoftmax, ModelKind::Mlp1, ModelKind::TwoTower, ModelKind::VoxelLinear];
    let mut out = Vec::new();
    for kind in kinds {
        for objective in [Objective::Vision, Objective::Medical] {
            out.push(check_gradient(kind, objective, coordinates, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_agrees_on_a_few_instances() {
        const N: usize = 20;
        for c in oracle_suite(N, 3) {
            assert!(c.passed(), "{} failed: {:?}", c.name, c.first_failure);
            assert_eq!(c.instances, N, "{}", c.name);
        }
    }

    #[test]
    fn gradients_check_out_for_every_model() {
        for g in gradient_suite(20, 5).unwrap() {
            assert!(g.passed(20), "{:?}/{:?}: {:?}", g.model, g.objective, g.report);
        }
    }
}
