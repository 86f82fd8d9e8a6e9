//! Slow, independent reference implementations used to cross-check the fast
//! paths: exhaustive enumeration, explicit interval tests, all-pairs distances
//! and per-voxel closed forms. Nothing here shares code with the routines it
//! checks beyond the data types.

use std::collections::BTreeSet;

use crate::volume::{MaskVolume, ProbVolume, VolumeGrid};

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Class CMP by enumerating every wrong class and testing the strict indicator.
pub fn cmp_class(probs: &[f64], label: usize) -> f64 {
    let mut total = 0.0;
    for wrong in 0..probs.len() {
        if wrong == label {
            continue;
        }
        if probs[wrong] > probs[label] {
            let mut rest = 0.0;
            for (j, p) in probs.iter().enumerate() {
                if j != wrong {
                    rest += p;
                }
            }
            total += probs[wrong] / rest;
        }
    }
    total
}

/// Voxel CMP by explicit per-voxel branching.
pub fn cmp_voxel(probs: &ProbVolume, labels: &MaskVolume, clamp_eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.data.len() {
        let mut p = if labels.data[i] == 1 { probs.data[i] } else { 1.0 - probs.data[i] };
        if p > 1.0 - clamp_eps {
            p = 1.0 - clamp_eps;
        }
        total += p / (1.0 - p);
    }
    total / probs.data.len() as f64
}

/// Per-bin `(count, mean confidence, accuracy)` and ECE, assigning samples by
/// explicit interval tests `[b/B, (b+1)/B)` with the last bin closed.
pub fn ece(conf: &[f64], correct: &[bool], num_bins: usize) -> (Vec<(usize, f64, f64)>, f64) {
    let n = conf.len();
    let mut bins = Vec::with_capacity(num_bins);
    let mut total = 0.0;
    for b in 0..num_bins {
        let lo = b as f64 / num_bins as f64;
        let hi = (b + 1) as f64 / num_bins as f64;
        let last = b + 1 == num_bins;
        let members: Vec<usize> = (0..n).filter(|&i| conf[i] >= lo && (conf[i] < hi || (last && conf[i] <= hi))).collect();
        if members.is_empty() {
            bins.push((0, 0.0, 0.0));
            continue;
        }
        let mut cs = 0.0;
        let mut hits = 0usize;
        for &i in &members {
            cs += conf[i];
            if correct[i] {
                hits += 1;
            }
        }
        let k = members.len();
        let mc = cs / k as f64;
        let acc = hits as f64 / k as f64;
        total += k as f64 / n as f64 * (acc - mc).abs();
        bins.push((k, mc, acc));
    }
    (bins, total)
}

fn foreground(mask: &MaskVolume) -> BTreeSet<(usize, usize, usize)> {
    (0..mask.data.len()).filter(|i| mask.data[*i] == 1).map(|i| mask.dims.coords(i)).collect()
}

/// `(|A ∩ B|, |A|, |B|)` by set intersection.
pub fn overlap_counts(a: &MaskVolume, b: &MaskVolume) -> (usize, usize, usize) {
    let sa = foreground(a);
    let sb = foreground(b);
    (sa.intersection(&sb).count(), sa.len(), sb.len())
}

pub fn dsc(a: &MaskVolume, b: &MaskVolume) -> f64 {
    let (inter, na, nb) = overlap_counts(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn boundary(mask: &MaskVolume) -> Vec<(usize, usize, usize)> {
    let fg = foreground(mask);
    let [nx, ny, nz] = mask.dims.as_array();
    let steps: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
    fg.iter()
        .copied()
        .filter(|&(x, y, z)| {
            steps.iter().any(|&(dx, dy, dz)| {
                let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                let outside = a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize;
                outside || !fg.contains(&(a as usize, b as usize, c as usize))
            })
        })
        .collect()
}

/// HD95 from all pairwise boundary distances; `None` if either mask is empty.
pub fn hd95(a: &MaskVolume, b: &MaskVolume) -> Option<f64> {
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let s = a.spacing.0;
    let dist = |p: (usize, usize, usize), q: (usize, usize, usize)| {
        let dx = (p.0 as f64 - q.0 as f64) * s[0];
        let dy = (p.1 as f64 - q.1 as f64) * s[1];
        let dz = (p.2 as f64 - q.2 as f64) * s[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let nearest = |p, set: &[(usize, usize, usize)]| set.iter().map(|q| dist(p, *q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = ba.iter().map(|p| nearest(*p, &bb)).collect();
    all.extend(bb.iter().map(|p| nearest(*p, &ba)));
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    Some(if lo + 1 < all.len() { all[lo] * (1.0 - frac) + all[lo + 1] * frac } else { all[lo] })
}

/// Stencil features of one voxel, written out neighbour by neighbour.
fn stencil(v: &VolumeGrid, x: usize, y: usize, z: usize) -> [f64; 3] {
    let [nx, ny, nz] = v.dims.as_array();
    let c = v.get(x, y, z);
    let xm = if x == 0 { 0 } else { x - 1 };
    let xp = if x + 1 == nx { x } else { x + 1 };
    let ym = if y == 0 { 0 } else { y - 1 };
    let yp = if y + 1 == ny { y } else { y + 1 };
    let zm = if z == 0 { 0 } else { z - 1 };
    let zp = if z + 1 == nz { z } else { z + 1 };
    let nb = [v.get(xm, y, z), v.get(xp, y, z), v.get(x, ym, z), v.get(x, yp, z), v.get(x, y, zm), v.get(x, y, zp)];
    let s: f64 = nb.iter().sum();
    let m7 = (c + s) / 7.0;
    let var = (nb.iter().map(|u| (u - m7) * (u - m7)).sum::<f64>() + (c - m7) * (c - m7)) / 7.0;
    [c, s / 6.0, var]
}

/// Patch-averaged Fisher trace of the voxel-linear model from its closed-form
/// score `(1[y=1] − σ(z))·(f, 1)`, enumerating patch origins directly.
pub fn fisher_3d_voxel_linear(weights: &[f64; 4], v: &VolumeGrid, labels: &MaskVolume, edge: usize, stride: usize) -> Option<f64> {
    let [nx, ny, nz] = v.dims.as_array();
    if nx < edge || ny < edge || nz < edge {
        return None;
    }
    let mut patch_traces = Vec::new();
    let mut z0 = 0;
    while z0 + edge <= nz {
        let mut y0 = 0;
        while y0 + edge <= ny {
            let mut x0 = 0;
            while x0 + edge <= nx {
                let mut terms = Vec::new();
                for z in z0..z0 + edge {
                    for y in y0..y0 + edge {
                        for x in x0..x0 + edge {
                            let f = stencil(v, x, y, z);
                            let logit = weights[0] * f[0] + weights[1] * f[1] + weights[2] * f[2] + weights[3];
                            let p = 1.0 / (1.0 + (-logit).exp());
                            let r = f64::from(labels.get(x, y, z)) - p;
                            terms.push(r * r * (f[0] * f[0] + f[1] * f[1] + f[2] * f[2] + 1.0));
                        }
                    }
                }
                patch_traces.push(compensated_sum(terms.iter().copied()) / terms.len() as f64);
                x0 += stride;
            }
            y0 += stride;
        }
        z0 += stride;
    }
    Some(compensated_sum(patch_traces.iter().copied()) / patch_traces.len() as f64)
}

/// Symmetric contrastive loss evaluated literally: cosine similarities,
/// exponentials and compensated sums, no max-shift.
pub fn contrastive(images: &[Vec<f64>], texts: &[Vec<f64>], tau: f64) -> f64 {
    let n = images.len();
    let norm = |v: &[f64]| compensated_sum(v.iter().map(|a| a * a)).sqrt();
    let sim = |i: usize, j: usize| {
        compensated_sum(images[i].iter().zip(&texts[j]).map(|(a, b)| a * b)) / (norm(&images[i]) * norm(&texts[j])) / tau
    };
    let mut l_img = Vec::new();
    let mut l_txt = Vec::new();
    for i in 0..n {
        let row = compensated_sum((0..n).map(|j| sim(i, j).exp()));
        let col = compensated_sum((0..n).map(|j| sim(j, i).exp()));
        l_img.push(row.ln() - sim(i, i));
        l_txt.push(col.ln() - sim(i, i));
    }
    0.5 * (compensated_sum(l_img) / n as f64 + compensated_sum(l_txt) / n as f64)
}

/// Two-pass population standard deviation.
pub fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = compensated_sum(v.iter().copied()) / n;
    (compensated_sum(v.iter().map(|x| (x - mean) * (x - mean))) / n).sqrt()
}
