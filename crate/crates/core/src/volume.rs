//! Dense 3D grids. Element order is x fastest, then y, then z.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn cube(edge: usize) -> Self {
        Self::new(edge, edge, edge)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.nx, (i / self.nx) % self.ny, i / (self.nx * self.ny))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Voxel size in millimetres along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

impl Spacing {
    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return invalid(format!("voxel spacing must be positive, got {:?}", self.0));
        }
        Ok(())
    }
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    if dims.is_empty() {
        return invalid("volume dimensions must be positive");
    }
    if dims.len() != len {
        return invalid(format!("{} voxels for dims {:?}", len, dims.as_array()));
    }
    Ok(())
}

/// Scalar intensity volume, stored at 32-bit precision like scanner data.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        spacing.validate()?;
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite intensity");
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)] as f64
    }
}

/// Binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_len(dims, data.len())?;
        spacing.validate()?;
        if data.iter().any(|v| *v > 1) {
            return invalid("mask values must be 0 or 1");
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self { dims, spacing, data: vec![0; dims.len()] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }
}

/// Foreground probability per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_len(dims, data.len())?;
        spacing.validate()?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("voxel probability outside [0, 1]");
        }
        Ok(Self { dims, spacing, data })
    }

    /// `p >= threshold` becomes foreground.
    pub fn threshold(&self, threshold: f64) -> MaskVolume {
        MaskVolume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|p| u8::from(*p >= threshold)).collect(),
        }
    }

    /// Argmax label per voxel; ties at 0.5 resolve to foreground.
    pub fn predicted_mask(&self) -> MaskVolume {
        self.threshold(0.5)
    }
}

pub(crate) fn ensure_same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.as_array(), b.as_array()));
    }
    Ok(())
}
