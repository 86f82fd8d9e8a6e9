use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row-major labelled feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return invalid("feature dimension must be positive");
        }
        if features.len() != dim * labels.len() {
            return invalid(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            ));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Rows at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
        }
        Batch { dim: self.dim, features, labels }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Batch> {
        Batch::new(self.dim, self.features.clone(), labels)
    }
}
