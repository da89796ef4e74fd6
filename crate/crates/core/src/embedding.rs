//! Vector math shared by every stage: normalization, cosine similarity,
//! tempered softmax and argmax.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Tolerance used when checking unit norms and probability sums.
pub const NORM_TOL: f64 = 1e-6;

/// A real embedding of dimension q. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVec(Vec<f64>);

impl FeatureVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("feature vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite entry at index {i}"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOL
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        FeatureVec::new(v)
    }
}

impl From<FeatureVec> for Vec<f64> {
    fn from(v: FeatureVec) -> Vec<f64> {
        v.0
    }
}

/// A discrete distribution: entries in [0, 1] summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {s}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        let n = n.max(1);
        Self(vec![1.0 / n as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(v: ProbVector) -> Vec<f64> {
        v.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean norm. A zero vector is an error, never NaN.
pub fn l2_normalize(v: &[f64]) -> Result<FeatureVec> {
    let n = norm(v);
    if v.is_empty() {
        return Err(Error::Empty("vector to normalize"));
    }
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n}"
        )));
    }
    FeatureVec::new(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `softmax(scores / temperature)`, stabilised by subtracting the maximum.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("non-finite softmax score".into()));
    }
    Ok(ProbVector(softmax_unchecked(scores, temperature)))
}

/// Softmax without input validation; callers guarantee finite scores.
pub(crate) fn softmax_unchecked(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .map(|s| ((s - m) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Backward pass of `y = softmax(z / t)`: returns dL/dz given dL/dy.
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], temperature: f64) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(yi, dyi)| yi * (dyi - inner) / temperature)
        .collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("argmax input"));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}
