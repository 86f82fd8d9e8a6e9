//! Synthetic covariate-shift benchmarks: Gaussian feature classification with a
//! fixed labelling rule, and multi-site lesion volumes.
//!
//! Classification: source features are `N(0, I_d)`. The target moves the first
//! `shifted_axes` coordinates to `N(μ, s²)` and leaves the rest alone, so the
//! density ratio and KL divergence are closed-form. Labels come from one
//! deterministic rule applied to the features in both splits:
//! `y = argmax_k  a_k·x + γ_k((u·x)² − 1)` with unit vectors `a_k`, `u`
//! drawn from the seed. The quadratic term makes linear models misspecified,
//! which is what produces confident mistakes away from the source.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Result};
use crate::rng::RngState;
use crate::volume::{Dims, MaskVolume, Spacing, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Target mean `m` on each shifted axis.
    MeanShift,
    /// Target standard deviation `1 + m` on each shifted axis.
    CovarianceScale,
    /// Scanner-like affine drift `x ↦ (1 + m/4)·x + m/2` on each shifted axis.
    SiteIntensity,
}

fn default_shifted_axes() -> usize {
    1
}

fn default_curvature() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub shift_kind: ShiftKind,
    pub magnitude: f64,
    pub n_src: usize,
    pub n_tgt: usize,
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    /// Number of leading coordinates the shift acts on.
    #[serde(default = "default_shifted_axes")]
    pub shifted_axes: usize,
    /// Weight `γ` of the quadratic part of the labelling rule.
    #[serde(default = "default_curvature")]
    pub curvature: f64,
}

impl ShiftSpec {
    pub fn new(shift_kind: ShiftKind, magnitude: f64, n_src: usize, n_tgt: usize, classes: usize, dim: usize, seed: u64) -> Self {
        Self { shift_kind, magnitude, n_src, n_tgt, classes, dim, seed, shifted_axes: 1, curvature: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return invalid("shift magnitude must be a nonnegative finite number");
        }
        if self.n_src == 0 || self.n_tgt == 0 {
            return invalid("both splits need at least one sample");
        }
        if self.classes < 2 || self.dim == 0 {
            return invalid("need at least 2 classes and 1 feature");
        }
        if self.shifted_axes > self.dim {
            return invalid(format!("{} shifted axes in dimension {}", self.shifted_axes, self.dim));
        }
        if !(self.curvature >= 0.0) || !self.curvature.is_finite() {
            return invalid("curvature must be nonnegative");
        }
        Ok(())
    }

    /// Per-axis target mean and standard deviation.
    pub fn target_axis(&self) -> (f64, f64) {
        let m = self.magnitude;
        match self.shift_kind {
            ShiftKind::MeanShift => (m, 1.0),
            ShiftKind::CovarianceScale => (0.0, 1.0 + m),
            ShiftKind::SiteIntensity => (0.5 * m, 1.0 + 0.25 * m),
        }
    }

    /// `P_tgt(x) / P_src(x)`.
    pub fn density_ratio(&self, x: &[f64]) -> f64 {
        let (mu, s) = self.target_axis();
        let log: f64 = x[..self.shifted_axes]
            .iter()
            .map(|v| -s.ln() + 0.5 * v * v - (v - mu).powi(2) / (2.0 * s * s))
            .sum();
        log.exp()
    }

    /// `KL(P_src ‖ P_tgt)`.
    pub fn kl_src_tgt(&self) -> f64 {
        let (mu, s) = self.target_axis();
        self.shifted_axes as f64 * (s.ln() + (1.0 + mu * mu) / (2.0 * s * s) - 0.5)
    }
}

/// The shared conditional rule `x ↦ y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub dim: usize,
    pub classes: usize,
    /// `K×d` row-major linear directions `a_k`.
    pub linear: Vec<f64>,
    /// Unit direction `u` of the quadratic term.
    pub quadratic: Vec<f64>,
    /// Per-class quadratic weights `γ_k`.
    pub curvature: Vec<f64>,
}

/// Random unit vector supported on coordinates `range`.
fn unit_vector(rng: &mut RngState, d: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; d];
        for j in range.clone() {
            v[j] = rng.next_normal();
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

impl LabelRule {
    /// Linear directions live on the unshifted coordinates and the quadratic
    /// direction on the shifted ones (each falls back to all coordinates when
    /// its block is empty), so the shift moves inputs along the direction a
    /// linear model cannot represent. Class `k` gets quadratic weight
    /// `γ·k/(K−1)`.
    pub fn random(spec: &ShiftSpec, rng: &mut RngState) -> Self {
        let (d, k, s) = (spec.dim, spec.classes, spec.shifted_axes);
        let lin = if s < d { s..d } else { 0..d };
        let quad = if s > 0 { 0..s } else { 0..d };
        let linear = (0..k).flat_map(|_| unit_vector(rng, d, lin.clone())).collect();
        let quadratic = unit_vector(rng, d, quad);
        let curvature = (0..k).map(|c| spec.curvature * c as f64 / (k - 1) as f64).collect();
        Self { dim: d, classes: k, linear, quadratic, curvature }
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let u: f64 = self.quadratic.iter().zip(x).map(|(w, v)| w * v).sum();
        (0..self.classes)
            .map(|k| {
                let a: f64 = self.linear[k * d..(k + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum();
                a + self.curvature[k] * (u * u - 1.0)
            })
            .collect()
    }

    pub fn label(&self, x: &[f64]) -> usize {
        crate::math::argmax(&self.scores(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedDataset {
    pub spec: ShiftSpec,
    pub rule: LabelRule,
    pub source: Batch,
    pub target: Batch,
    /// `P_tgt/P_src` at each source point. Empty when unknown.
    pub source_weights: Vec<f64>,
}

impl ShiftedDataset {
    /// Relabels `features` with the stored rule.
    pub fn relabel(&self, batch: &Batch) -> Vec<usize> {
        (0..batch.len()).map(|i| self.rule.label(batch.x(i))).collect()
    }
}

fn sample_split(spec: &ShiftSpec, rule: &LabelRule, n: usize, shifted: bool, rng: &mut RngState) -> Batch {
    let (mu, s) = if shifted { spec.target_axis() } else { (0.0, 1.0) };
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..spec.dim)
            .map(|j| {
                let z = rng.next_normal();
                if j < spec.shifted_axes {
                    mu + s * z
                } else {
                    z
                }
            })
            .collect();
        labels.push(rule.label(&x));
        features.extend(x);
    }
    Batch { dim: spec.dim, features, labels }
}

pub fn gen_classification(spec: &ShiftSpec) -> Result<ShiftedDataset> {
    spec.validate()?;
    let rule = LabelRule::random(spec, &mut RngState::stream(spec.seed, 1));
    let source = sample_split(spec, &rule, spec.n_src, false, &mut RngState::stream(spec.seed, 2));
    let target = sample_split(spec, &rule, spec.n_tgt, true, &mut RngState::stream(spec.seed, 3));
    let source_weights = (0..source.len()).map(|i| spec.density_ratio(source.x(i))).collect();
    Ok(ShiftedDataset { spec: spec.clone(), rule, source, target, source_weights })
}

/// Scanner transform `v ↦ gain·v + offset + noise·N(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteParams {
    pub gain: f64,
    pub offset: f64,
    pub noise: f64,
}

impl SiteParams {
    pub const IDENTITY: SiteParams = SiteParams { gain: 1.0, offset: 0.0, noise: 0.0 };
}

fn default_contrast() -> f64 {
    1.0
}

fn default_background() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    pub n_sites: usize,
    pub volumes_per_site: usize,
    pub edge: usize,
    pub seed: u64,
    /// Lesion intensity above background.
    #[serde(default = "default_contrast")]
    pub lesion_contrast: f64,
    /// Standard deviation of the smooth background field.
    #[serde(default = "default_background")]
    pub background_sigma: f64,
    /// Explicit per-site transforms; drawn from the seed when absent
    /// (site 0 is then the identity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_params: Option<Vec<SiteParams>>,
}

impl VolumeSpec {
    pub fn new(n_sites: usize, volumes_per_site: usize, edge: usize, seed: u64) -> Self {
        Self { n_sites, volumes_per_site, edge, seed, lesion_contrast: 1.0, background_sigma: 0.25, site_params: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge < 16 {
            return invalid(format!("volume edge must be at least 16, got {}", self.edge));
        }
        if self.n_sites == 0 || self.volumes_per_site == 0 {
            return invalid("need at least one site and one volume per site");
        }
        if let Some(p) = &self.site_params {
            if p.len() != self.n_sites {
                return invalid(format!("{} site transforms for {} sites", p.len(), self.n_sites));
            }
            if p.iter().any(|s| !s.gain.is_finite() || !s.offset.is_finite() || !(s.noise >= 0.0)) {
                return invalid("site transforms need finite gain/offset and nonnegative noise");
            }
        }
        Ok(())
    }

    pub fn resolved_site_params(&self) -> Vec<SiteParams> {
        if let Some(p) = &self.site_params {
            return p.clone();
        }
        let mut rng = RngState::stream(self.seed, 0x5173);
        (0..self.n_sites)
            .map(|s| {
                let draw = SiteParams {
                    gain: rng.uniform_range(0.7, 1.3),
                    offset: rng.uniform_range(-0.3, 0.3),
                    noise: rng.uniform_range(0.02, 0.12),
                };
                if s == 0 {
                    SiteParams::IDENTITY
                } else {
                    draw
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub image: VolumeGrid,
    pub mask: MaskVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVolumeSet {
    pub spec: VolumeSpec,
    pub site_params: Vec<SiteParams>,
    pub sites: Vec<Vec<LabeledVolume>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.axes[0] * self.axes[1] * self.axes[2]
    }
}

pub fn ellipsoid_mask(dims: Dims, spacing: Spacing, lesions: &[Ellipsoid]) -> MaskVolume {
    let mut m = MaskVolume::zeros(dims, spacing);
    for i in 0..dims.len() {
        let (x, y, z) = dims.coords(i);
        if lesions.iter().any(|e| e.contains(x, y, z)) {
            m.data[i] = 1;
        }
    }
    m
}

/// 3×3×3 mean filter with edge replication.
fn box_blur(dims: Dims, v: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims.as_array();
    let clamp = |c: usize, d: isize, n: usize| (c as isize + d).clamp(0, n as isize - 1) as usize;
    (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let mut acc = 0.0;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += v[dims.index(clamp(x, dx, nx), clamp(y, dy, ny), clamp(z, dz, nz))];
                    }
                }
            }
            acc / 27.0
        })
        .collect()
}

fn random_lesions(edge: usize, rng: &mut RngState) -> Vec<Ellipsoid> {
    let count = 1 + rng.below(3) as usize;
    let hi = edge as f64 / 4.0;
    (0..count)
        .map(|_| {
            let axes = [0; 3].map(|_| rng.uniform_range(4.0, hi.max(4.0)));
            let mut center = [0.0; 3];
            for i in 0..3 {
                center[i] = rng.uniform_range(axes[i], edge as f64 - 1.0 - axes[i]);
            }
            Ellipsoid { center, axes }
        })
        .collect()
}

fn gen_volume(spec: &VolumeSpec, site: SiteParams, rng: &mut RngState, noise_rng: &mut RngState) -> LabeledVolume {
    let dims = Dims::cube(spec.edge);
    let spacing = Spacing::default();
    let white: Vec<f64> = (0..dims.len()).map(|_| rng.next_normal()).collect();
    let smooth = box_blur(dims, &box_blur(dims, &white));
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt().max(1e-12);
    let lesions = random_lesions(spec.edge, rng);
    let mask = ellipsoid_mask(dims, spacing, &lesions);
    let data = smooth
        .iter()
        .zip(&mask.data)
        .map(|(b, m)| {
            let v = spec.background_sigma * (b - mean) / sd + spec.lesion_contrast * f64::from(*m);
            let noisy = site.gain * v + site.offset + if site.noise > 0.0 { site.noise * noise_rng.next_normal() } else { 0.0 };
            noisy as f32
        })
        .collect();
    LabeledVolume { image: VolumeGrid { dims, spacing, data }, mask }
}

/// Multi-site lesion volumes. Geometry and background depend only on
/// `(seed, site, index)` through per-volume streams; the site transform has
/// its own stream, so masks are untouched by site effects.
pub fn gen_volumes_with(spec: &VolumeSpec) -> Result<SyntheticVolumeSet> {
    spec.validate()?;
    let site_params = spec.resolved_site_params();
    let sites = (0..spec.n_sites)
        .map(|s| {
            (0..spec.volumes_per_site)
                .into_par_iter()
                .map(|v| {
                    let id = ((s as u64) << 32) | v as u64;
                    let mut rng = RngState::stream(spec.seed, id);
                    let mut noise = RngState::stream(spec.seed ^ 0x6e6f_6973_65, id);
                    gen_volume(spec, site_params[s], &mut rng, &mut noise)
                })
                .collect()
        })
        .collect();
    Ok(SyntheticVolumeSet { spec: spec.clone(), site_params, sites })
}

pub fn gen_volumes(n_sites: usize, volumes_per_site: usize, edge: usize, seed: u64) -> Result<SyntheticVolumeSet> {
    gen_volumes_with(&VolumeSpec::new(n_sites, volumes_per_site, edge, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_magnitude_has_unit_weights_and_no_divergence() {
        let spec = ShiftSpec::new(ShiftKind::MeanShift, 0.0, 50, 50, 2, 3, 1);
        let ds = gen_classification(&spec).unwrap();
        assert!(ds.source_weights.iter().all(|w| (*w - 1.0).abs() < 1e-15));
        assert_eq!(spec.kl_src_tgt(), 0.0);
    }

    #[test]
    fn stored_labels_follow_the_rule() {
        let ds = gen_classification(&ShiftSpec::new(ShiftKind::MeanShift, 2.0, 300, 300, 3, 4, 9)).unwrap();
        assert_eq!(ds.relabel(&ds.source), ds.source.labels);
        assert_eq!(ds.relabel(&ds.target), ds.target.labels);
    }

    #[test]
    fn kl_increases_with_magnitude() {
        for kind in [ShiftKind::MeanShift, ShiftKind::CovarianceScale, ShiftKind::SiteIntensity] {
            let mut prev = -1.0;
            for k in 0..20 {
                let kl = ShiftSpec::new(kind, k as f64 * 0.25, 1, 1, 2, 2, 0).kl_src_tgt();
                assert!(kl > prev, "{kind:?} at step {k}");
                prev = kl;
            }
        }
    }

    #[test]
    fn density_ratio_matches_direct_pdfs() {
        let spec = ShiftSpec { shifted_axes: 2, ..ShiftSpec::new(ShiftKind::SiteIntensity, 1.2, 1, 1, 2, 3, 0) };
        let (mu, s) = spec.target_axis();
        let pdf = |v: f64, m: f64, sd: f64| (-(v - m).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let x = [0.4, -1.1, 2.0];
        let direct = pdf(x[0], mu, s) * pdf(x[1], mu, s) / (pdf(x[0], 0.0, 1.0) * pdf(x[1], 0.0, 1.0));
        assert!((spec.density_ratio(&x) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn volumes_are_deterministic_and_well_formed() {
        let a = gen_volumes(2, 2, 16, 5).unwrap();
        let b = gen_volumes(2, 2, 16, 5).unwrap();
        assert_eq!(a.sites, b.sites);
        assert_eq!(a.site_params[0], SiteParams::IDENTITY);
        for v in a.sites.iter().flatten() {
            assert_eq!(v.image.dims, Dims::cube(16));
            assert!(v.mask.count() > 0);
        }
        assert!(gen_volumes(1, 1, 15, 0).is_err());
    }

    #[test]
    fn site_transform_leaves_masks_alone() {
        let mut plain = VolumeSpec::new(2, 3, 16, 8);
        plain.site_params = Some(vec![SiteParams::IDENTITY; 2]);
        let mut scanned = plain.clone();
        scanned.site_params = Some(vec![SiteParams::IDENTITY, SiteParams { gain: 1.4, offset: 0.5, noise: 0.2 }]);
        let a = gen_volumes_with(&plain).unwrap();
        let b = gen_volumes_with(&scanned).unwrap();
        assert_eq!(a.sites[0], b.sites[0]);
        for (u, v) in a.sites[1].iter().zip(&b.sites[1]) {
            assert_eq!(u.mask, v.mask);
            assert_ne!(u.image, v.image);
        }
    }
}
