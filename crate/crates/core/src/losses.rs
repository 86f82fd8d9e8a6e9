//! Task losses and the two composite objectives
//! `base + λ1·FIP + λ2·CMP`.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Result};
use crate::math::{dot, log_softmax, normalize, normalize_backward, softmax_unchecked};
use crate::models::{ModelHandle, ModelKind};
use crate::penalties::{evaluate_penalties, voxel_batch, PenaltyConfig, PenaltyForm};
use crate::volume::{ensure_same_dims, MaskVolume, ProbVolume, VolumeGrid};

/// Probability clamp used by the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub image_embeddings: Vec<Vec<f64>>,
    pub text_embeddings: Vec<Vec<f64>>,
    pub temperature: f64,
}

/// Contrastive loss value and its gradients w.r.t. the raw (unnormalized) embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_images: Vec<Vec<f64>>,
    pub d_texts: Vec<Vec<f64>>,
}

fn validate_embeddings(batch: &EmbeddingBatch) -> Result<()> {
    let n = batch.image_embeddings.len();
    if n < 2 {
        return invalid(format!("contrastive loss needs at least 2 pairs, got {n}"));
    }
    if batch.text_embeddings.len() != n {
        return invalid("image and text batches differ in length");
    }
    if !(batch.temperature > 0.0) || !batch.temperature.is_finite() {
        return invalid("temperature must be positive");
    }
    let d = batch.image_embeddings[0].len();
    for e in batch.image_embeddings.iter().chain(&batch.text_embeddings) {
        if e.len() != d {
            return invalid("embedding widths differ");
        }
        let norm = dot(e, e).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return invalid("zero-norm or non-finite embedding");
        }
    }
    Ok(())
}

/// Symmetric image-text contrastive loss with diagonal positives.
pub fn contrastive_loss(batch: &EmbeddingBatch) -> Result<f64> {
    Ok(contrastive_loss_with_grad(batch)?.loss)
}

pub fn contrastive_loss_with_grad(batch: &EmbeddingBatch) -> Result<ContrastiveGrad> {
    validate_embeddings(batch)?;
    let n = batch.image_embeddings.len();
    let inv_t = 1.0 / batch.temperature;
    let (img_u, img_n): (Vec<_>, Vec<_>) = batch.image_embeddings.iter().map(|e| normalize(e)).unzip();
    let (txt_u, txt_n): (Vec<_>, Vec<_>) = batch.text_embeddings.iter().map(|e| normalize(e)).unzip();
    // sims[i][j] = cos(image_i, text_j) / τ
    let sims: Vec<Vec<f64>> = img_u
        .iter()
        .map(|a| txt_u.iter().map(|b| dot(a, b).clamp(-1.0, 1.0) * inv_t).collect())
        .collect();
    let nf = n as f64;
    let mut d_sims = vec![vec![0.0; n]; n];
    let mut l_img = 0.0;
    for i in 0..n {
        let ls = log_softmax(&sims[i]);
        l_img -= ls[i];
        for j in 0..n {
            d_sims[i][j] += 0.5 * (ls[j].exp() - f64::from(u8::from(i == j))) / nf;
        }
    }
    let mut l_txt = 0.0;
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sims[i][j]).collect();
        let ls = log_softmax(&col);
        l_txt -= ls[j];
        for i in 0..n {
            d_sims[i][j] += 0.5 * (ls[i].exp() - f64::from(u8::from(i == j))) / nf;
        }
    }
    let loss = 0.5 * (l_img / nf + l_txt / nf);
    let width = img_u[0].len();
    let mut d_img_u = vec![vec![0.0; width]; n];
    let mut d_txt_u = vec![vec![0.0; width]; n];
    for i in 0..n {
        for j in 0..n {
            let g = d_sims[i][j] * inv_t;
            for r in 0..width {
                d_img_u[i][r] += g * txt_u[j][r];
                d_txt_u[j][r] += g * img_u[i][r];
            }
        }
    }
    let d_images = (0..n).map(|i| normalize_backward(&img_u[i], img_n[i], &d_img_u[i])).collect();
    let d_texts = (0..n).map(|j| normalize_backward(&txt_u[j], txt_n[j], &d_txt_u[j])).collect();
    Ok(ContrastiveGrad { loss, d_images, d_texts })
}

/// Hard Dice loss `1 − 2|A∩B| / (|A|+|B|)`; two empty masks give 0.
pub fn dice_loss(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64> {
    Ok(1.0 - crate::metrics::dsc(pred, truth)?)
}

/// Soft Dice on probabilities (no smoothing constant).
pub fn soft_dice_loss(pred: &ProbVolume, truth: &MaskVolume) -> Result<f64> {
    ensure_same_dims(pred.dims, truth.dims)?;
    let y: Vec<f64> = truth.data.iter().map(|v| *v as f64).collect();
    Ok(soft_dice_with_grad(&pred.data, &y).0)
}

fn soft_dice_with_grad(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>();
    if total == 0.0 {
        return (0.0, vec![0.0; p.len()]);
    }
    let loss = 1.0 - 2.0 * inter / total;
    let grad = y.iter().map(|yi| -2.0 * (yi * total - inter) / (total * total)).collect();
    (loss, grad)
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1−ε]`.
pub fn bce_loss(pred: &ProbVolume, truth: &MaskVolume) -> Result<f64> {
    ensure_same_dims(pred.dims, truth.dims)?;
    let y: Vec<f64> = truth.data.iter().map(|v| *v as f64).collect();
    Ok(bce_with_grad(&pred.data, &y, &mut Vec::new()).0)
}

fn bce_with_grad(p: &[f64], y: &[f64], gates: &mut Vec<u8>) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, (pi, yi)) in p.iter().zip(y).enumerate() {
        let clamped = *pi < BCE_EPS || *pi > 1.0 - BCE_EPS;
        gates.push(u8::from(clamped));
        let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        if !clamped {
            grad[i] = (-yi / pc + (1.0 - yi) / (1.0 - pc)) / n;
        }
    }
    (loss / n, grad)
}

/// Dice + BCE, the segmentation base loss.
pub fn sam_loss(pred: &ProbVolume, truth: &MaskVolume) -> Result<f64> {
    Ok(soft_dice_loss(pred, truth)? + bce_loss(pred, truth)?)
}

/// A composite objective evaluated at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub base: f64,
    pub fip: f64,
    pub cmp: f64,
    pub total: f64,
    pub grad: Vec<f64>,
    /// Piecewise gates held fixed during differentiation.
    pub gates: Vec<u8>,
}

fn combine(base: f64, base_grad: Vec<f64>, pen: crate::penalties::PenaltyEval, cfg: &PenaltyConfig, mut gates: Vec<u8>) -> LossBreakdown {
    let total = base + cfg.lambda1 * pen.fip + cfg.lambda2 * pen.cmp;
    let grad = base_grad
        .iter()
        .zip(&pen.fip_grad)
        .zip(&pen.cmp_grad)
        .map(|((b, f), c)| b + cfg.lambda1 * f + cfg.lambda2 * c)
        .collect();
    gates.extend(pen.gates);
    LossBreakdown { base, fip: pen.fip, cmp: pen.cmp, total, grad, gates }
}

/// Classification base loss: contrastive for the two-tower model, mean
/// cross-entropy otherwise.
pub fn vision_base_loss(model: &ModelHandle, theta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; theta.len()];
    if model.kind == ModelKind::TwoTower {
        let eb = EmbeddingBatch {
            image_embeddings: (0..batch.len()).map(|i| model.image_embedding(theta, batch.x(i))).collect(),
            text_embeddings: batch.labels.iter().map(|y| model.text_embedding(theta, *y)).collect(),
            temperature: model.temperature,
        };
        let cg = contrastive_loss_with_grad(&eb)?;
        for i in 0..batch.len() {
            model.image_embedding_backward(batch.x(i), &cg.d_images[i], &mut grad);
            model.text_embedding_backward(batch.y(i), &cg.d_texts[i], &mut grad);
        }
        return Ok((cg.loss, grad));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let (z, acts) = model.forward_generic(theta, batch.x(i));
        let ls = log_softmax(&z);
        let y = batch.y(i);
        loss -= ls[y];
        let up: Vec<f64> = ls
            .iter()
            .enumerate()
            .map(|(c, l)| (l.exp() - f64::from(u8::from(c == y))) / n)
            .collect();
        model.backward_generic(theta, batch.x(i), &acts, &up, &mut grad);
    }
    Ok((loss / n, grad))
}

fn check_inputs(model: &ModelHandle, theta: &[f64], batch: &Batch, cfg: &PenaltyConfig) -> Result<()> {
    cfg.validate()?;
    if theta.len() != model.num_params() {
        return invalid("parameter count does not match model");
    }
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if batch.dim != model.input_dim() {
        return invalid(format!("batch has {} features, model expects {}", batch.dim, model.input_dim()));
    }
    if batch.labels.iter().any(|y| *y >= model.classes()) {
        return invalid("label out of range");
    }
    Ok(())
}

/// `L_base + λ1·I_vision(θ) + λ2·CMP_vision` with its gradient.
pub fn loss_vision(model: &ModelHandle, theta: &[f64], batch: &Batch, cfg: &PenaltyConfig) -> Result<LossBreakdown> {
    check_inputs(model, theta, batch, cfg)?;
    let (base, base_grad) = vision_base_loss(model, theta, batch)?;
    let all: Vec<usize> = (0..batch.len()).collect();
    let pen = evaluate_penalties(model, theta, batch, &[all], PenaltyForm::Vision, cfg.fisher_labels)?;
    Ok(combine(base, base_grad, pen, cfg, Vec::new()))
}

/// Dice + BCE on the class-1 probability of each sample, with gates and gradient.
fn medical_base_loss(model: &ModelHandle, theta: &[f64], batch: &Batch, gates: &mut Vec<u8>) -> (f64, Vec<f64>) {
    let logits = model.logits_batch(theta, batch);
    let p: Vec<f64> = logits.iter().map(|z| softmax_unchecked(z)[1]).collect();
    let y: Vec<f64> = batch.labels.iter().map(|v| *v as f64).collect();
    let (dice, d_dice) = soft_dice_with_grad(&p, &y);
    let (bce, d_bce) = bce_with_grad(&p, &y, gates);
    let mut grad = vec![0.0; theta.len()];
    for i in 0..batch.len() {
        let dp = d_dice[i] + d_bce[i];
        if dp == 0.0 {
            continue;
        }
        let s = p[i] * (1.0 - p[i]) * dp;
        let (_, acts) = model.forward_generic(theta, batch.x(i));
        model.backward_generic(theta, batch.x(i), &acts, &[-s, s], &mut grad);
    }
    (dice + bce, grad)
}

/// `(Dice + BCE) + λ1·I_3D(θ) + λ2·CMP_3D` over a batch whose samples are
/// partitioned into `groups` (patches) for the Fisher average. Binary tasks only.
pub fn loss_medical_groups(
    model: &ModelHandle,
    theta: &[f64],
    batch: &Batch,
    groups: &[Vec<usize>],
    cfg: &PenaltyConfig,
) -> Result<LossBreakdown> {
    check_inputs(model, theta, batch, cfg)?;
    if model.classes() != 2 {
        return invalid("the segmentation objective needs a binary model");
    }
    let mut gates = Vec::new();
    let (base, base_grad) = medical_base_loss(model, theta, batch, &mut gates);
    let pen = evaluate_penalties(model, theta, batch, groups, PenaltyForm::Medical, cfg.fisher_labels)?;
    Ok(combine(base, base_grad, pen, cfg, gates))
}

/// Segmentation objective of a voxel model on one volume, patches from `cfg.patch`.
pub fn loss_medical(
    model: &ModelHandle,
    theta: &[f64],
    volume: &VolumeGrid,
    truth: &MaskVolume,
    cfg: &PenaltyConfig,
) -> Result<LossBreakdown> {
    if model.kind != ModelKind::VoxelLinear {
        return Err(crate::Error::Config("loss_medical on volumes needs a voxel_linear model".into()));
    }
    let batch = voxel_batch(volume, truth)?;
    let groups = cfg.patch.tile(volume.dims)?;
    loss_medical_groups(model, theta, &batch, &groups, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};

    fn mask(v: &[u8]) -> MaskVolume {
        MaskVolume::new(Dims::new(v.len(), 1, 1), Spacing::default(), v.to_vec()).unwrap()
    }

    fn prob(v: &[f64]) -> ProbVolume {
        ProbVolume::new(Dims::new(v.len(), 1, 1), Spacing::default(), v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(dice_loss(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_loss(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 1.0);
        assert_eq!(dice_loss(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 0.0);
        assert!(dice_loss(&mask(&[0, 0]), &mask(&[0])).is_err());
    }

    #[test]
    fn soft_dice_equals_hard_dice_on_binary_input() {
        let a = mask(&[1, 0, 1, 1, 0, 1, 0]);
        let b = mask(&[1, 1, 0, 1, 0, 0, 0]);
        let pa = prob(&a.data.iter().map(|v| *v as f64).collect::<Vec<_>>());
        assert_eq!(soft_dice_loss(&pa, &b).unwrap(), dice_loss(&a, &b).unwrap());
    }

    #[test]
    fn bce_examples() {
        let v = bce_loss(&prob(&[0.5, 0.5]), &mask(&[1, 0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let v = bce_loss(&prob(&[0.9, 0.2]), &mask(&[1, 0])).unwrap();
        assert!((v - 0.164_252_033_486_018).abs() < 1e-12);
        let v = bce_loss(&prob(&[1.0, 0.0]), &mask(&[1, 0])).unwrap();
        assert!((v - -(1.0 - BCE_EPS).ln()).abs() < 1e-15);
        assert!(v < 1.1e-7);
    }

    #[test]
    fn bce_minimized_at_base_rate() {
        let truth = mask(&[1, 0, 0, 1, 0, 0, 0, 0, 1, 0]);
        let best = (1..100)
            .map(|k| k as f64 / 100.0)
            .min_by(|a, b| {
                let la = bce_loss(&prob(&[*a; 10]), &truth).unwrap();
                let lb = bce_loss(&prob(&[*b; 10]), &truth).unwrap();
                la.partial_cmp(&lb).unwrap()
            })
            .unwrap();
        assert!((best - 0.3).abs() < 1e-12);
    }

    #[test]
    fn contrastive_uniform_is_log_n() {
        let e = vec![vec![1.0, 0.0]; 4];
        let l = contrastive_loss(&EmbeddingBatch { image_embeddings: e.clone(), text_embeddings: e, temperature: 0.07 })
            .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_perfect_alignment_vanishes() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = EmbeddingBatch { image_embeddings: e.clone(), text_embeddings: e, temperature: 0.01 };
        assert!(contrastive_loss(&b).unwrap() < 1e-40);
    }

    #[test]
    fn contrastive_rejects_singletons() {
        let b = EmbeddingBatch { image_embeddings: vec![vec![1.0]], text_embeddings: vec![vec![1.0]], temperature: 1.0 };
        assert!(contrastive_loss(&b).is_err());
    }

    #[test]
    fn contrastive_tower_swap_symmetry() {
        let imgs = vec![vec![0.3, -1.0, 0.2], vec![1.0, 0.5, -0.4], vec![-0.2, 0.1, 0.9]];
        let txts = vec![vec![0.1, 0.3, 0.2], vec![-1.0, 0.5, 0.0], vec![0.2, -0.6, 0.4]];
        let a = contrastive_loss(&EmbeddingBatch { image_embeddings: imgs.clone(), text_embeddings: txts.clone(), temperature: 0.3 })
            .unwrap();
        let b = contrastive_loss(&EmbeddingBatch { image_embeddings: txts, text_embeddings: imgs, temperature: 0.3 }).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}
