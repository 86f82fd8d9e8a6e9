//! Fisher-information and confidence-misalignment regularizers for toy
//! classifiers and voxel segmenters, with calibration and segmentation
//! metrics, covariate-shift generators, bound evaluators and a trainer.

pub mod bounds;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod params;
pub mod penalties;
pub mod rng;
pub mod selfcheck;
pub mod shiftgen;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
