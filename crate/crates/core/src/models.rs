//! Toy differentiable models with hand-written gradients.
//!
//! Every model maps one sample to a vector of class logits. The voxel segmenter
//! is a two-class model with logits `[0, w·f + b]`, so its foreground
//! probability is `sigmoid(w·f + b)` and the softmax-based penalty code applies
//! unchanged. Forward and backward passes are generic over [`Real`] so the
//! Fisher penalty can differentiate through the score function with duals.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::math::{dot, normalize, normalize_backward, softmax_unchecked, LogitVector, Real};
use crate::params::{ParamVector, Segment};
use crate::rng::RngState;
use crate::volume::{ProbVolume, VolumeGrid};

pub const IMG_SEGMENT: &str = "img_encoder";
pub const TXT_SEGMENT: &str = "txt_encoder";

/// Number of per-voxel stencil features: intensity, 6-neighbour mean, local variance.
pub const VOXEL_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearSoftmax,
    Mlp1,
    TwoTower,
    VoxelLinear,
}

impl ModelKind {
    pub fn code(self) -> u32 {
        match self {
            ModelKind::LinearSoftmax => 0,
            ModelKind::Mlp1 => 1,
            ModelKind::TwoTower => 2,
            ModelKind::VoxelLinear => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => ModelKind::LinearSoftmax,
            1 => ModelKind::Mlp1,
            2 => ModelKind::TwoTower,
            3 => ModelKind::VoxelLinear,
            _ => return None,
        })
    }
}

/// `hidden` is the hidden width for `mlp1` and the embedding width for `two_tower`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    pub kind: ModelKind,
    pub dims: ModelDims,
    /// Similarity temperature (two-tower only).
    pub temperature: f64,
    pub params: ParamVector,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub enum Activations<T> {
    Linear,
    Mlp { hidden: Vec<T> },
    TwoTower { img_unit: Vec<T>, img_norm: T, txt_unit: Vec<Vec<T>>, txt_norm: Vec<T> },
}

fn layout(kind: ModelKind, dims: ModelDims) -> Result<Vec<Segment>> {
    let ModelDims { input: d, hidden: h, classes: k } = dims;
    if k < 2 {
        return invalid("models need at least 2 classes");
    }
    Ok(match kind {
        ModelKind::LinearSoftmax => {
            if d == 0 {
                return invalid("input dimension must be positive");
            }
            vec![Segment::new("head", 0, k * d + k)]
        }
        ModelKind::Mlp1 => {
            if d == 0 || h == 0 {
                return invalid("mlp1 needs positive input and hidden widths");
            }
            vec![Segment::new("hidden", 0, h * d + h), Segment::new("head", h * d + h, k * h + k)]
        }
        ModelKind::TwoTower => {
            if d == 0 || h == 0 {
                return invalid("two_tower needs positive input and embedding widths");
            }
            vec![Segment::new(IMG_SEGMENT, 0, h * d), Segment::new(TXT_SEGMENT, h * d, h * k)]
        }
        ModelKind::VoxelLinear => {
            if d != VOXEL_FEATURES || k != 2 {
                return invalid("voxel_linear takes 3 stencil features and 2 classes");
            }
            vec![Segment::new("segmenter", 0, VOXEL_FEATURES + 1)]
        }
    })
}

fn fan_in(kind: ModelKind, dims: ModelDims, index: usize) -> usize {
    let ModelDims { input: d, hidden: h, classes: k } = dims;
    match kind {
        ModelKind::LinearSoftmax => d,
        ModelKind::Mlp1 => {
            if index < h * d + h {
                d
            } else {
                h
            }
        }
        ModelKind::TwoTower => {
            if index < h * d {
                d
            } else {
                k
            }
        }
        ModelKind::VoxelLinear => VOXEL_FEATURES,
    }
}

impl ModelHandle {
    /// Fresh model with parameters uniform in `±1/√fan_in`.
    pub fn new(kind: ModelKind, dims: ModelDims, temperature: f64, seed: u64) -> Result<Self> {
        let segments = layout(kind, dims)?;
        let n: usize = segments.iter().map(|s| s.len).sum();
        let mut rng = RngState::stream(seed, 0x6d6f_6465_6c00 + kind.code() as u64);
        let values = (0..n)
            .map(|i| {
                let bound = 1.0 / (fan_in(kind, dims, i) as f64).sqrt();
                rng.uniform_range(-bound, bound)
            })
            .collect();
        Self::from_values(kind, dims, temperature, values)
    }

    pub fn from_values(kind: ModelKind, dims: ModelDims, temperature: f64, values: Vec<f64>) -> Result<Self> {
        if kind == ModelKind::TwoTower && !(temperature > 0.0 && temperature.is_finite()) {
            return invalid(format!("temperature must be positive, got {temperature}"));
        }
        let params = ParamVector::new(values, layout(kind, dims)?)?;
        Ok(Self { kind, dims, temperature, params })
    }

    pub fn linear_softmax(input: usize, classes: usize, seed: u64) -> Result<Self> {
        Self::new(ModelKind::LinearSoftmax, ModelDims { input, hidden: 0, classes }, 1.0, seed)
    }

    pub fn mlp1(input: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        Self::new(ModelKind::Mlp1, ModelDims { input, hidden, classes }, 1.0, seed)
    }

    pub fn two_tower(input: usize, embed: usize, classes: usize, temperature: f64, seed: u64) -> Result<Self> {
        Self::new(ModelKind::TwoTower, ModelDims { input, hidden: embed, classes }, temperature, seed)
    }

    pub fn voxel_linear(seed: u64) -> Result<Self> {
        Self::new(ModelKind::VoxelLinear, ModelDims { input: VOXEL_FEATURES, hidden: 0, classes: 2 }, 1.0, seed)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    pub fn input_dim(&self) -> usize {
        self.dims.input
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.segments() != self.params.segments() {
            return invalid("parameter layout does not match model");
        }
        Ok(Self { params, ..self.clone() })
    }

    fn check_theta<T>(&self, theta: &[T]) {
        debug_assert_eq!(theta.len(), self.num_params());
    }

    /// Raw (unnormalized) image-tower embedding.
    pub fn image_embedding<T: Real>(&self, theta: &[T], x: &[f64]) -> Vec<T> {
        let ModelDims { input: d, hidden: e, .. } = self.dims;
        (0..e)
            .map(|r| {
                let row = &theta[r * d..(r + 1) * d];
                let mut acc = T::zero();
                for (w, xi) in row.iter().zip(x) {
                    acc += w.scale(*xi);
                }
                acc
            })
            .collect()
    }

    /// Raw text-tower embedding of class `class` (one-hot class token input).
    pub fn text_embedding<T: Real>(&self, theta: &[T], class: usize) -> Vec<T> {
        let ModelDims { input: d, hidden: e, classes: k } = self.dims;
        let off = e * d;
        (0..e).map(|r| theta[off + r * k + class]).collect()
    }

    pub fn image_embedding_backward<T: Real>(&self, x: &[f64], d_emb: &[T], grad: &mut [T]) {
        let d = self.dims.input;
        for (r, g) in d_emb.iter().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                grad[r * d + j] += g.scale(*xj);
            }
        }
    }

    pub fn text_embedding_backward<T: Real>(&self, class: usize, d_emb: &[T], grad: &mut [T]) {
        let ModelDims { input: d, hidden: e, classes: k } = self.dims;
        let off = e * d;
        for (r, g) in d_emb.iter().enumerate() {
            grad[off + r * k + class] += *g;
        }
    }

    /// Logits and the activations the backward pass needs.
    pub fn forward_generic<T: Real>(&self, theta: &[T], x: &[f64]) -> (Vec<T>, Activations<T>) {
        self.check_theta(theta);
        let ModelDims { input: d, hidden: h, classes: k } = self.dims;
        match self.kind {
            ModelKind::LinearSoftmax => {
                let logits = (0..k)
                    .map(|c| {
                        let mut acc = theta[k * d + c];
                        for (w, xi) in theta[c * d..(c + 1) * d].iter().zip(x) {
                            acc += w.scale(*xi);
                        }
                        acc
                    })
                    .collect();
                (logits, Activations::Linear)
            }
            ModelKind::Mlp1 => {
                let b1 = h * d;
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                let hidden: Vec<T> = (0..h)
                    .map(|r| {
                        let mut acc = theta[b1 + r];
                        for (w, xi) in theta[r * d..(r + 1) * d].iter().zip(x) {
                            acc += w.scale(*xi);
                        }
                        acc.tanh()
                    })
                    .collect();
                let logits = (0..k)
                    .map(|c| theta[b2 + c] + dot(&theta[w2 + c * h..w2 + (c + 1) * h], &hidden))
                    .collect();
                (logits, Activations::Mlp { hidden })
            }
            ModelKind::TwoTower => {
                let (img_unit, img_norm) = normalize(&self.image_embedding(theta, x));
                let inv_t = 1.0 / self.temperature;
                let mut txt_unit = Vec::with_capacity(k);
                let mut txt_norm = Vec::with_capacity(k);
                let mut logits = Vec::with_capacity(k);
                for c in 0..k {
                    let (u, n) = normalize(&self.text_embedding(theta, c));
                    logits.push(dot(&img_unit, &u).scale(inv_t));
                    txt_unit.push(u);
                    txt_norm.push(n);
                }
                (logits, Activations::TwoTower { img_unit, img_norm, txt_unit, txt_norm })
            }
            ModelKind::VoxelLinear => {
                let mut z = theta[VOXEL_FEATURES];
                for (w, f) in theta[..VOXEL_FEATURES].iter().zip(x) {
                    z += w.scale(*f);
                }
                (vec![T::zero(), z], Activations::Linear)
            }
        }
    }

    /// Accumulates `(∂logits/∂θ)ᵀ · d_logits` into `grad`.
    pub fn backward_generic<T: Real>(
        &self,
        theta: &[T],
        x: &[f64],
        acts: &Activations<T>,
        d_logits: &[T],
        grad: &mut [T],
    ) {
        let ModelDims { input: d, hidden: h, classes: k } = self.dims;
        match (self.kind, acts) {
            (ModelKind::LinearSoftmax, _) => {
                for c in 0..k {
                    let g = d_logits[c];
                    for (j, xj) in x.iter().enumerate() {
                        grad[c * d + j] += g.scale(*xj);
                    }
                    grad[k * d + c] += g;
                }
            }
            (ModelKind::Mlp1, Activations::Mlp { hidden }) => {
                let b1 = h * d;
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                let mut d_hidden = vec![T::zero(); h];
                for c in 0..k {
                    let g = d_logits[c];
                    grad[b2 + c] += g;
                    for r in 0..h {
                        grad[w2 + c * h + r] += g * hidden[r];
                        d_hidden[r] += g * theta[w2 + c * h + r];
                    }
                }
                for r in 0..h {
                    let s = hidden[r];
                    let da = d_hidden[r] * (T::from_f64(1.0) - s * s);
                    grad[b1 + r] += da;
                    for (j, xj) in x.iter().enumerate() {
                        grad[r * d + j] += da.scale(*xj);
                    }
                }
            }
            (ModelKind::TwoTower, Activations::TwoTower { img_unit, img_norm, txt_unit, txt_norm }) => {
                let inv_t = 1.0 / self.temperature;
                let mut d_img_unit = vec![T::zero(); h];
                for c in 0..k {
                    let g = d_logits[c].scale(inv_t);
                    for r in 0..h {
                        d_img_unit[r] += g * txt_unit[c][r];
                    }
                    let d_txt_unit: Vec<T> = img_unit.iter().map(|v| g * *v).collect();
                    let d_txt = normalize_backward(&txt_unit[c], txt_norm[c], &d_txt_unit);
                    self.text_embedding_backward(c, &d_txt, grad);
                }
                let d_img = normalize_backward(img_unit, *img_norm, &d_img_unit);
                self.image_embedding_backward(x, &d_img, grad);
            }
            (ModelKind::VoxelLinear, _) => {
                // the class-0 logit is pinned at 0
                let g = d_logits[1];
                for (j, f) in x.iter().enumerate().take(VOXEL_FEATURES) {
                    grad[j] += g.scale(*f);
                }
                grad[VOXEL_FEATURES] += g;
            }
            _ => unreachable!("activation record does not match model kind"),
        }
    }

    /// `∇_θ log p(y | x; θ)`, the per-sample score.
    pub fn score<T: Real>(&self, theta: &[T], x: &[f64], label: usize) -> Vec<T> {
        let (logits, acts) = self.forward_generic(theta, x);
        let p = softmax_unchecked(&logits);
        let up: Vec<T> = p
            .iter()
            .enumerate()
            .map(|(c, pc)| T::from_f64(if c == label { 1.0 } else { 0.0 }) - *pc)
            .collect();
        let mut grad = vec![T::zero(); theta.len()];
        self.backward_generic(theta, x, &acts, &up, &mut grad);
        grad
    }

    /// Logits at the model's current parameters.
    pub fn forward_classifier(&self, x: &[f64]) -> Result<LogitVector> {
        if x.len() != self.dims.input {
            return invalid(format!("input has {} features, model expects {}", x.len(), self.dims.input));
        }
        let (logits, _) = self.forward_generic(self.params.values(), x);
        LogitVector::new(logits)
    }

    pub fn logits_batch(&self, theta: &[f64], batch: &Batch) -> Vec<Vec<f64>> {
        (0..batch.len()).map(|i| self.forward_generic(theta, batch.x(i)).0).collect()
    }

    /// Class probabilities for every row of `batch`.
    pub fn predict_proba(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        if batch.dim != self.dims.input {
            return invalid(format!("batch has {} features, model expects {}", batch.dim, self.dims.input));
        }
        Ok(self
            .logits_batch(self.params.values(), batch)
            .iter()
            .map(|z| softmax_unchecked(z))
            .collect())
    }

    /// Per-voxel foreground probabilities of the segmenter.
    pub fn forward_segmenter(&self, volume: &VolumeGrid) -> Result<ProbVolume> {
        if self.kind != ModelKind::VoxelLinear {
            return Err(Error::Config("forward_segmenter needs a voxel_linear model".into()));
        }
        let feats = voxel_features(volume)?;
        let theta = self.params.values();
        let data = (0..volume.dims.len())
            .map(|i| {
                let f = &feats[i * VOXEL_FEATURES..(i + 1) * VOXEL_FEATURES];
                let (z, _) = self.forward_generic(theta, f);
                crate::math::sigmoid(z[1])
            })
            .collect();
        ProbVolume::new(volume.dims, volume.spacing, data)
    }

    /// Records a forward pass for a later [`ModelHandle::backward`].
    pub fn forward_tape(&self, tape: &mut Tape, x: &[f64]) -> Result<LogitVector> {
        if x.len() != self.dims.input {
            return invalid(format!("input has {} features, model expects {}", x.len(), self.dims.input));
        }
        let (logits, acts) = self.forward_generic(self.params.values(), x);
        tape.records.push(TapeRecord { x: x.to_vec(), acts });
        LogitVector::new(logits)
    }

    /// Gradient of the recorded scalar given `∂loss/∂logits` for every recorded sample.
    pub fn backward(&self, tape: &Tape, d_logits: &[Vec<f64>]) -> Result<ParamVector> {
        if tape.records.is_empty() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if d_logits.len() != tape.records.len() {
            return invalid(format!(
                "{} upstream gradients for {} recorded samples",
                d_logits.len(),
                tape.records.len()
            ));
        }
        let theta = self.params.values();
        let mut grad = vec![0.0; theta.len()];
        for (rec, up) in tape.records.iter().zip(d_logits) {
            if up.len() != self.dims.classes {
                return invalid("upstream gradient length differs from class count");
            }
            self.backward_generic(theta, &rec.x, &rec.acts, up, &mut grad);
        }
        self.params.with_values(grad)
    }
}

#[derive(Debug, Clone)]
struct TapeRecord {
    x: Vec<f64>,
    acts: Activations<f64>,
}

/// Forward-pass record consumed by [`ModelHandle::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    records: Vec<TapeRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Stencil features for every voxel, flattened `[intensity, neighbour mean, variance]`.
///
/// Neighbours outside the grid are replaced by the nearest in-bounds voxel
/// (edge replication). The variance is the population variance of the 7-point
/// stencil (centre plus 6 face neighbours).
pub fn voxel_features(volume: &VolumeGrid) -> Result<Vec<f64>> {
    let dims = volume.dims;
    if dims.nx < 3 || dims.ny < 3 || dims.nz < 3 {
        return invalid(format!("volume {:?} smaller than the 3x3x3 stencil", dims.as_array()));
    }
    let mut out = Vec::with_capacity(dims.len() * VOXEL_FEATURES);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let c = volume.get(x, y, z);
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                let nb = [
                    volume.get(clampi(xi - 1, dims.nx), y, z),
                    volume.get(clampi(xi + 1, dims.nx), y, z),
                    volume.get(x, clampi(yi - 1, dims.ny), z),
                    volume.get(x, clampi(yi + 1, dims.ny), z),
                    volume.get(x, y, clampi(zi - 1, dims.nz)),
                    volume.get(x, y, clampi(zi + 1, dims.nz)),
                ];
                let nb_mean = nb.iter().sum::<f64>() / 6.0;
                let mean7 = (c + nb.iter().sum::<f64>()) / 7.0;
                let var7 = ((c - mean7).powi(2) + nb.iter().map(|v| (v - mean7).powi(2)).sum::<f64>()) / 7.0;
                out.extend_from_slice(&[c, nb_mean, var7]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};

    fn all_models(seed: u64) -> Vec<ModelHandle> {
        vec![
            ModelHandle::linear_softmax(4, 3, seed).unwrap(),
            ModelHandle::mlp1(4, 5, 3, seed).unwrap(),
            ModelHandle::two_tower(4, 3, 3, 0.5, seed).unwrap(),
            ModelHandle::voxel_linear(seed).unwrap(),
        ]
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        for kind in [ModelKind::LinearSoftmax, ModelKind::Mlp1] {
            let dims = ModelDims { input: 4, hidden: 3, classes: 3 };
            let n = layout(kind, dims).unwrap().iter().map(|s| s.len).sum();
            let m = ModelHandle::from_values(kind, dims, 1.0, vec![0.0; n]).unwrap();
            let batch = Batch::new(4, vec![0.3, -1.0, 2.0, 0.1], vec![0]).unwrap();
            for p in &m.predict_proba(&batch).unwrap()[0] {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_weights_select_matching_class() {
        let k = 3;
        let mut w = vec![0.0; k * k + k];
        for c in 0..k {
            w[c * k + c] = 1.0;
        }
        let m = ModelHandle::from_values(ModelKind::LinearSoftmax, ModelDims { input: k, hidden: 0, classes: k }, 1.0, w)
            .unwrap();
        for c in 0..k {
            let mut x = vec![0.0; k];
            x[c] = 1.0;
            assert_eq!(m.forward_classifier(&x).unwrap().argmax(), c);
        }
    }

    #[test]
    fn linear_forward_matches_matrix_multiply() {
        let m = ModelHandle::linear_softmax(3, 2, 11).unwrap();
        let x = [0.5, -1.25, 2.0];
        let th = m.params.values();
        let logits = m.forward_classifier(&x).unwrap();
        for c in 0..2 {
            let expect = th[c * 3] * x[0] + th[c * 3 + 1] * x[1] + th[c * 3 + 2] * x[2] + th[6 + c];
            assert!((logits.values()[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let m = ModelHandle::linear_softmax(3, 2, 1).unwrap();
        assert!(m.forward_classifier(&[1.0]).is_err());
    }

    #[test]
    fn init_bounded_by_fan_in() {
        let m = ModelHandle::mlp1(9, 4, 2, 5).unwrap();
        let v = m.params.values();
        assert!(v[..40].iter().all(|w| w.abs() <= 1.0 / 3.0));
        assert!(v[40..].iter().all(|w| w.abs() <= 0.5));
        assert_eq!(ModelHandle::mlp1(9, 4, 2, 5).unwrap(), m);
    }

    #[test]
    fn two_tower_segments() {
        let m = ModelHandle::two_tower(4, 3, 2, 0.07, 1).unwrap();
        let names: Vec<_> = m.params.segments().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec![IMG_SEGMENT, TXT_SEGMENT]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let m = ModelHandle::linear_softmax(2, 2, 1).unwrap();
        assert!(matches!(m.backward(&Tape::new(), &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let m = ModelHandle::linear_softmax(3, 4, 8).unwrap();
        let x = [0.2, -0.7, 1.3];
        let y = 2;
        let mut tape = Tape::new();
        let logits = m.forward_tape(&mut tape, &x).unwrap();
        let p = softmax_unchecked(logits.values());
        let up: Vec<f64> = p.iter().enumerate().map(|(c, pc)| pc - f64::from(c == y as usize)).collect();
        let g = m.backward(&tape, &[up.clone()]).unwrap();
        for c in 0..4 {
            for j in 0..3 {
                assert!((g.values()[c * 3 + j] - up[c] * x[j]).abs() < 1e-15);
            }
            assert!((g.values()[12 + c] - up[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        for m in all_models(3) {
            let x = vec![0.4; m.input_dim()];
            let mut tape = Tape::new();
            m.forward_tape(&mut tape, &x).unwrap();
            let g = m.backward(&tape, &[vec![0.0; m.classes()]]).unwrap();
            assert!(g.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn logit_backward_matches_finite_differences() {
        let mut rng = RngState::new(77);
        for m in all_models(21) {
            for _ in 0..10 {
                let x: Vec<f64> = (0..m.input_dim()).map(|_| rng.next_normal()).collect();
                let up: Vec<f64> = (0..m.classes()).map(|_| rng.next_normal()).collect();
                let theta = m.params.values().to_vec();
                let f = |t: &[f64]| dot(&m.forward_generic(t, &x).0, &up);
                let (_, acts) = m.forward_generic(&theta, &x);
                let mut g = vec![0.0; theta.len()];
                m.backward_generic(&theta, &x, &acts, &up, &mut g);
                for j in 0..theta.len() {
                    let h = 1e-6;
                    let mut tp = theta.clone();
                    tp[j] += h;
                    let mut tm = theta.clone();
                    tm[j] -= h;
                    let fd = (f(&tp) - f(&tm)) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-7 * (1.0 + g[j].abs()), "{:?} coord {j}: {fd} vs {}", m.kind, g[j]);
                }
            }
        }
    }

    #[test]
    fn segmenter_saturation_and_zero() {
        let dims = Dims::cube(4);
        let mut rng = RngState::new(4);
        let vol = VolumeGrid::new(dims, Spacing::default(), (0..64).map(|_| rng.next_uniform() as f32).collect())
            .unwrap();
        let zero = ModelHandle::from_values(
            ModelKind::VoxelLinear,
            ModelDims { input: 3, hidden: 0, classes: 2 },
            1.0,
            vec![0.0; 4],
        )
        .unwrap();
        let p = zero.forward_segmenter(&vol).unwrap();
        assert!(p.data.iter().all(|v| *v == 0.5));
        assert_eq!(p.dims, vol.dims);
        let hot = zero.with_params(zero.params.with_values(vec![0.0, 0.0, 0.0, 60.0]).unwrap()).unwrap();
        assert!(hot.forward_segmenter(&vol).unwrap().data.iter().all(|v| *v >= 1.0 - 1e-12));
    }

    #[test]
    fn segmenter_rejects_tiny_volume() {
        let vol = VolumeGrid::new(Dims::new(2, 4, 4), Spacing::default(), vec![0.0; 32]).unwrap();
        assert!(ModelHandle::voxel_linear(1).unwrap().forward_segmenter(&vol).is_err());
    }
}
