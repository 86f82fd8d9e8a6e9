//! Evaluation metrics: accuracy, ECE with reliability bins, Brier score, DSC,
//! HD95, domain generalization gap and cross-site spread.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::ProbVector;
use crate::penalties::cmp_voxel_argmax;
use crate::volume::{ensure_same_dims, Dims, MaskVolume, ProbVolume};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<BinStat>,
    /// Mean squared gap between confidence and correctness.
    pub brier: f64,
    pub n: usize,
    pub num_bins: usize,
}

impl CalibrationReport {
    /// ECE recomposed from the bin table.
    pub fn ece_from_bins(&self) -> f64 {
        ece_from_bins(&self.bins, self.n)
    }
}

pub fn ece_from_bins(bins: &[BinStat], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

fn bin_edge(b: usize, num_bins: usize) -> f64 {
    b as f64 / num_bins as f64
}

/// Bin of `c`: the largest `b` with `c ≥ b/B`, capped at `B−1` so that 1.0
/// lands in the last bin.
pub fn bin_index(c: f64, num_bins: usize) -> usize {
    let mut b = ((c * num_bins as f64).floor().max(0.0) as usize).min(num_bins - 1);
    while b + 1 < num_bins && c >= bin_edge(b + 1, num_bins) {
        b += 1;
    }
    while b > 0 && c < bin_edge(b, num_bins) {
        b -= 1;
    }
    b
}

/// Expected calibration error over `num_bins` equal-width bins of `[0, 1]`.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() {
        return invalid("ECE of an empty sample");
    }
    if confidences.len() != correct.len() {
        return invalid(format!("{} confidences for {} outcomes", confidences.len(), correct.len()));
    }
    if num_bins == 0 {
        return invalid("bin count must be at least 1");
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return invalid(format!("confidence {c} outside [0, 1]"));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut brier = 0.0;
    for (c, ok) in confidences.iter().zip(correct) {
        let b = bin_index(*c, num_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(*ok);
        brier += (c - f64::from(u8::from(*ok))).powi(2);
    }
    let n = confidences.len();
    let bins: Vec<BinStat> = (0..num_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] > 0 {
                (conf_sum[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            BinStat {
                lower: bin_edge(b, num_bins),
                upper: bin_edge(b + 1, num_bins),
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport { ece: ece_from_bins(&bins, n), bins, brier: brier / n as f64, n, num_bins })
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return invalid("accuracy needs equal-length, nonempty inputs");
    }
    let hits = probs.iter().zip(labels).filter(|(p, y)| p.argmax() == **y).count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Top-label calibration report of a classifier (confidence = max probability).
pub fn classification_calibration(probs: &[ProbVector], labels: &[usize], num_bins: usize) -> Result<CalibrationReport> {
    if probs.len() != labels.len() {
        return invalid("length mismatch");
    }
    let conf: Vec<f64> = probs.iter().map(|p| p.confidence()).collect();
    let correct: Vec<bool> = probs.iter().zip(labels).map(|(p, y)| p.argmax() == *y).collect();
    ece(&conf, &correct, num_bins)
}

/// Mean of `(y − p)²` over scalar probabilities and 0/1 outcomes.
pub fn brier(probs: &[f64], outcomes: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return invalid("Brier score of an empty sample");
    }
    if probs.len() != outcomes.len() {
        return invalid("length mismatch");
    }
    if outcomes.iter().any(|o| *o > 1) || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("Brier score needs probabilities in [0,1] and 0/1 outcomes");
    }
    Ok(probs.iter().zip(outcomes).map(|(p, y)| (*y as f64 - p).powi(2)).sum::<f64>() / probs.len() as f64)
}

/// Brier score of the true-class probability, `mean (1 − p_y)²`. For two
/// classes this equals the positive-class form `mean (p_1 − y)²`.
pub fn brier_classes(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return invalid("Brier score needs equal-length, nonempty inputs");
    }
    let mut acc = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        let py = *p.values().get(*y).ok_or_else(|| Error::InvalidInput("label out of range".into()))?;
        acc += (1.0 - py).powi(2);
    }
    Ok(acc / probs.len() as f64)
}

/// Voxel Brier score of a foreground-probability volume.
pub fn brier_volume(pred: &ProbVolume, truth: &MaskVolume) -> Result<f64> {
    ensure_same_dims(pred.dims, truth.dims)?;
    brier(&pred.data, &truth.data)
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks agree perfectly (1).
pub fn dsc(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64> {
    ensure_same_dims(pred.dims, truth.dims)?;
    let inter = pred.data.iter().zip(&truth.data).filter(|(a, b)| **a == 1 && **b == 1).count();
    let total = pred.count() + truth.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with a background face neighbour or on the grid border.
pub fn boundary_voxels(mask: &MaskVolume) -> Vec<usize> {
    let d = mask.dims;
    let mut out = Vec::new();
    for i in 0..d.len() {
        if mask.data[i] != 1 {
            continue;
        }
        let (x, y, z) = d.coords(i);
        let on_border = x == 0 || y == 0 || z == 0 || x + 1 == d.nx || y + 1 == d.ny || z + 1 == d.nz;
        let bg_neighbour = || {
            [
                d.index(x - 1, y, z),
                d.index(x + 1, y, z),
                d.index(x, y - 1, z),
                d.index(x, y + 1, z),
                d.index(x, y, z - 1),
                d.index(x, y, z + 1),
            ]
            .iter()
            .any(|j| mask.data[*j] == 0)
        };
        if on_border || bg_neighbour() {
            out.push(i);
        }
    }
    out
}

/// 1D lower envelope of parabolas `w (q − p)² + f(p)` (Felzenszwalb–Huttenlocher).
fn edt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    bounds.clear();
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + w * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w * (q as f64 - p as f64));
                    if s <= *bounds.last().unwrap() {
                        v.pop();
                        bounds.pop();
                    } else {
                        v.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = w * dq * dq + f[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest of `sites`.
pub fn squared_distance_transform(dims: Dims, spacing: [f64; 3], sites: &[usize]) -> Vec<f64> {
    let mut g = vec![f64::INFINITY; dims.len()];
    for &s in sites {
        g[s] = 0.0;
    }
    let [nx, ny, nz] = dims.as_array();
    let mut line = Vec::new();
    let mut out = Vec::new();
    // x pass
    for z in 0..nz {
        for y in 0..ny {
            line.clear();
            line.extend((0..nx).map(|x| g[dims.index(x, y, z)]));
            out.resize(nx, 0.0);
            edt_1d(&line, spacing[0] * spacing[0], &mut out);
            for x in 0..nx {
                g[dims.index(x, y, z)] = out[x];
            }
        }
    }
    // y pass
    for z in 0..nz {
        for x in 0..nx {
            line.clear();
            line.extend((0..ny).map(|y| g[dims.index(x, y, z)]));
            out.resize(ny, 0.0);
            edt_1d(&line, spacing[1] * spacing[1], &mut out);
            for y in 0..ny {
                g[dims.index(x, y, z)] = out[y];
            }
        }
    }
    // z pass
    for y in 0..ny {
        for x in 0..nx {
            line.clear();
            line.extend((0..nz).map(|z| g[dims.index(x, y, z)]));
            out.resize(nz, 0.0);
            edt_1d(&line, spacing[2] * spacing[2], &mut out);
            for z in 0..nz {
                g[dims.index(x, y, z)] = out[z];
            }
        }
    }
    g
}

/// Percentile `q ∈ [0,1]` with linear interpolation between order statistics
/// at position `q·(n−1)`.
pub fn percentile_linear(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    Some(v[lo] + frac * (v[hi] - v[lo]))
}

/// 95th percentile of the pooled directed boundary-to-boundary distances (mm).
pub fn hd95(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64> {
    ensure_same_dims(pred.dims, truth.dims)?;
    if pred.is_empty_mask() || truth.is_empty_mask() {
        return Err(Error::UndefinedMetric("HD95 is undefined when either mask is empty".into()));
    }
    let spacing = pred.spacing.0;
    let ba = boundary_voxels(pred);
    let bb = boundary_voxels(truth);
    let da = squared_distance_transform(pred.dims, spacing, &ba);
    let db = squared_distance_transform(truth.dims, spacing, &bb);
    let mut pooled: Vec<f64> = ba.iter().map(|i| db[*i].sqrt()).collect();
    pooled.extend(bb.iter().map(|i| da[*i].sqrt()));
    Ok(percentile_linear(&pooled, 0.95).expect("nonempty boundaries"))
}

pub fn dgg(acc_src: f64, acc_tgt: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc_src) || !(0.0..=1.0).contains(&acc_tgt) {
        return invalid("accuracies must lie in [0, 1]");
    }
    Ok(acc_src - acc_tgt)
}

/// Population standard deviation of per-site DSC.
pub fn cross_site_variance(dsc_per_site: &[f64]) -> Result<f64> {
    if dsc_per_site.len() < 2 {
        return invalid("cross-site spread needs at least 2 sites");
    }
    let n = dsc_per_site.len() as f64;
    let mean = dsc_per_site.iter().sum::<f64>() / n;
    Ok((dsc_per_site.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// How voxel confidence is read off a foreground probability.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelConfidence {
    /// `max(p, 1−p)` against argmax correctness.
    #[default]
    Argmax,
    /// `p` against the foreground indicator.
    Foreground,
}

pub fn voxel_ece(pred: &ProbVolume, truth: &MaskVolume, num_bins: usize, mode: VoxelConfidence) -> Result<CalibrationReport> {
    ensure_same_dims(pred.dims, truth.dims)?;
    let (conf, correct): (Vec<f64>, Vec<bool>) = match mode {
        VoxelConfidence::Argmax => pred
            .data
            .iter()
            .zip(&truth.data)
            .map(|(p, y)| {
                let fg = *p >= 0.5;
                (if fg { *p } else { 1.0 - *p }, u8::from(fg) == *y)
            })
            .unzip(),
        VoxelConfidence::Foreground => pred.data.iter().zip(&truth.data).map(|(p, y)| (*p, *y == 1)).unzip(),
    };
    ece(&conf, &correct, num_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub ece_voxel: f64,
    pub cmp_3d: f64,
}

pub fn seg_report(pred: &ProbVolume, truth: &MaskVolume, num_bins: usize) -> Result<SegReport> {
    let mask = pred.predicted_mask();
    let hd = match hd95(&mask, truth) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SegReport {
        dsc: dsc(&mask, truth)?,
        hd95: hd,
        ece_voxel: voxel_ece(pred, truth, num_bins, VoxelConfidence::Argmax)?.ece,
        cmp_3d: cmp_voxel_argmax(pred)?.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub dgg: f64,
    pub cross_site_std: f64,
}
