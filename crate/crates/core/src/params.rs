use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(name: &str, offset: usize, len: usize) -> Self {
        Self { name: name.to_string(), offset, len }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter vector with named, disjoint, covering segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite parameter value");
        }
        let mut sorted: Vec<&Segment> = segments.iter().collect();
        sorted.sort_by_key(|s| s.offset);
        let mut cursor = 0;
        for s in &sorted {
            if s.offset != cursor || s.len == 0 {
                return invalid(format!("segment '{}' leaves a gap, overlaps or is empty", s.name));
            }
            cursor += s.len;
        }
        if cursor != values.len() {
            return invalid(format!("segments cover {cursor} of {} parameters", values.len()));
        }
        Ok(Self { values, segments })
    }

    /// Single segment named `name` covering everything.
    pub fn single(name: &str, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![Segment::new(name, 0, n)])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("missing parameter segment '{name}'")))
    }

    /// Same segment layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return invalid(format!("expected {} values, got {}", self.values.len(), values.len()));
        }
        Self::new(values, self.segments.clone())
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], segments: self.segments.clone() }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}
