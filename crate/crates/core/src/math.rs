//! Numerically stable primitives shared by every other module.
//!
//! Everything that feeds a second derivative (the Fisher penalty gradient) is
//! written against [`Real`], so the same code runs on plain `f64` and on
//! forward-mode [`Dual`] numbers. Evaluating a gradient routine on duals seeded
//! with a tangent `v` yields the Hessian-vector product `H v` exactly.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Scalar field used by the generic model and penalty code.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn scale(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order forward-mode dual number `re + eps·ε`, `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Real for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.eps)
    }
}

/// Normalized class probabilities for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

/// Sum-to-one tolerance accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return invalid(format!("probability vector needs at least 2 classes, got {}", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("probability {v} outside [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return invalid(format!("probabilities sum to {sum}, not 1"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Largest class probability.
    pub fn confidence(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Pre-softmax class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("empty logit vector");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite logit");
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the first maximal element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn max_by_value<T: Real>(values: &[T]) -> T {
    let mut m = values[0];
    for v in &values[1..] {
        if v.value() > m.value() {
            m = *v;
        }
    }
    m
}

/// `log Σ exp(v)` with the running maximum factored out.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let m = max_by_value(values);
    let mut acc = T::zero();
    for v in values {
        acc += (*v - m).exp();
    }
    m + acc.ln()
}

/// Log-probabilities `z_i − LSE(z)`.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| *z - lse).collect()
}

/// Softmax without validation, for internal callers holding finite logits.
pub fn softmax_unchecked<T: Real>(logits: &[T]) -> Vec<T> {
    let m = max_by_value(logits);
    let exps: Vec<T> = logits.iter().map(|z| (*z - m).exp()).collect();
    let mut sum = T::zero();
    for e in &exps {
        sum += *e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softmax(logits / temperature)`.
pub fn stable_softmax(logits: &LogitVector, temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return invalid(format!("temperature must be positive and finite, got {temperature}"));
    }
    let scaled: Vec<f64> = logits.values().iter().map(|z| z / temperature).collect();
    if scaled.iter().any(|v| !v.is_finite()) {
        return invalid("scaled logits overflow");
    }
    let mut p = softmax_unchecked(&scaled);
    // Renormalize once more so the sum is 1 to the last ulp or two.
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    if p.len() < 2 {
        return invalid("softmax needs at least 2 logits");
    }
    Ok(ProbVector(p))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return invalid("cosine similarity of a zero-norm or non-finite vector");
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-normalizes `v`, returning the normalized vector and the original norm.
pub fn normalize<T: Real>(v: &[T]) -> (Vec<T>, T) {
    let norm = dot(v, v).sqrt();
    (v.iter().map(|x| *x / norm).collect(), norm)
}

/// Pulls a gradient w.r.t. a normalized vector `u = v/‖v‖` back to `v`:
/// `dv = (du − u (u·du)) / ‖v‖`.
pub fn normalize_backward<T: Real>(unit: &[T], norm: T, d_unit: &[T]) -> Vec<T> {
    let proj = dot(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(u, du)| (*du - *u * proj) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = stable_softmax(&LogitVector::new(vec![0.0; 3]).unwrap(), 1.0).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let d = 0.731;
        for c in [-500.0, -3.0, 0.0, 12.5, 700.0] {
            let a = stable_softmax(&LogitVector::new(vec![c, c + d]).unwrap(), 1.0).unwrap();
            let b = stable_softmax(&LogitVector::new(vec![0.0, d]).unwrap(), 1.0).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y} at c={c}");
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let l = LogitVector::new(vec![1.0, 2.0]).unwrap();
        assert!(stable_softmax(&l, 0.0).is_err());
        assert!(stable_softmax(&l, -1.0).is_err());
        assert!(stable_softmax(&l, f64::NAN).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn lse_no_overflow_at_large_magnitude() {
        let v = [1e4, -1e4, 9999.0];
        let l = log_sum_exp(&v);
        assert!(l.is_finite());
        assert!((l - (1e4 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[3.0, -1.0], &[3.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 4 / (sqrt5 * sqrt5)
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dual_tracks_derivatives() {
        let x = Dual::new(0.3, 1.0);
        let y = (x * x).exp().ln().sqrt().tanh() / (x + Dual::from_f64(1.0));
        // f(x) = tanh(|x|)/(x+1) for x>0
        let f = |x: f64| x.tanh() / (x + 1.0);
        let h = 1e-6;
        let fd = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
        assert!((y.re - f(0.3)).abs() < 1e-15);
        assert!((y.eps - fd).abs() < 1e-8);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![0.25, 0.75]).is_ok());
    }
}
