use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use starfm_core::models::{ModelDims, ModelHandle, ModelKind, VOXEL_FEATURES};
use starfm_core::shiftgen::{ShiftSpec, VolumeSpec};
use starfm_core::trainer::{SweepGrid, Task, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

fn default_hidden() -> usize {
    16
}

fn default_temperature() -> f64 {
    0.07
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width (mlp1) or embedding width (two_tower).
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Similarity temperature (two_tower).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Json, ReportFormat::Csv]
}

/// One experiment: data, model, training and optional sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelConfig,
    /// Classification benchmark (vision task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftSpec>,
    /// Lesion volumes (medical task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volumes: Option<VolumeSpec>,
    /// Source-site volumes used for training; the rest evaluate. Defaults to half.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_volumes: Option<usize>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::input(format!("config: {m}")));
        match self.task {
            Task::Vision => {
                let Some(shift) = &self.shift else { return bad("task vision needs a `shift` section".into()) };
                if self.volumes.is_some() || self.train_volumes.is_some() {
                    return bad("`volumes` and `train_volumes` only apply to task medical".into());
                }
                if self.model.kind == ModelKind::VoxelLinear {
                    return bad("model.kind voxel_linear needs task medical".into());
                }
                shift.validate().map_err(|e| CliError::input(format!("config.shift: {e}")))?;
            }
            Task::Medical => {
                let Some(vol) = &self.volumes else { return bad("task medical needs a `volumes` section".into()) };
                if self.shift.is_some() {
                    return bad("`shift` only applies to task vision".into());
                }
                if self.model.kind != ModelKind::VoxelLinear {
                    return bad("task medical needs model.kind voxel_linear".into());
                }
                vol.validate().map_err(|e| CliError::input(format!("config.volumes: {e}")))?;
                let n = self.n_train_volumes();
                if n == 0 || n >= vol.volumes_per_site {
                    return bad(format!("train_volumes must be in 1..{}, got {n}", vol.volumes_per_site));
                }
            }
        }
        if matches!(self.model.kind, ModelKind::Mlp1 | ModelKind::TwoTower) && self.model.hidden == 0 {
            return bad("model.hidden must be at least 1".into());
        }
        if !(self.model.temperature > 0.0) || !self.model.temperature.is_finite() {
            return bad("model.temperature must be positive".into());
        }
        self.train.validate().map_err(|e| CliError::input(format!("config.train: {e}")))?;
        if let Some(g) = &self.sweep {
            g.validate().map_err(|e| CliError::input(format!("config.sweep: {e}")))?;
        }
        if self.report_formats.is_empty() {
            return bad("report_formats must be nonempty".into());
        }
        Ok(())
    }

    pub fn n_train_volumes(&self) -> usize {
        let per_site = self.volumes.as_ref().map_or(0, |v| v.volumes_per_site);
        self.train_volumes.unwrap_or(per_site / 2)
    }

    /// `--seed` replaces every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        if let Some(s) = &mut self.shift {
            s.seed = seed;
        }
        if let Some(v) = &mut self.volumes {
            v.seed = seed;
        }
        self.train.seed = seed;
    }

    pub fn wants(&self, f: ReportFormat) -> bool {
        self.report_formats.contains(&f)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    /// Freshly initialized model; initialization is keyed by `train.seed`.
    pub fn build_model(&self) -> CliResult<ModelHandle> {
        let dims = match (&self.shift, &self.volumes) {
            (Some(s), _) => ModelDims { input: s.dim, hidden: self.model.hidden, classes: s.classes },
            _ => ModelDims { input: VOXEL_FEATURES, hidden: 0, classes: 2 },
        };
        Ok(ModelHandle::new(self.model.kind, dims, self.model.temperature, self.train.seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VISION: &str = r#"{
        "task": "vision",
        "model": {"kind": "linear_softmax"},
        "shift": {"shift_kind": "mean_shift", "magnitude": 2.0, "n_src": 100, "n_tgt": 100,
                  "classes": 2, "dim": 4, "seed": 1},
        "train": {"epochs": 2}
    }"#;

    #[test]
    fn minimal_vision_config_parses() {
        let c = ExperimentConfig::from_json(VISION).unwrap();
        assert_eq!(c.report_formats, vec![ReportFormat::Json, ReportFormat::Csv]);
        assert_eq!(c.build_model().unwrap().input_dim(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = VISION.replacen("\"task\"", "\"colour\": 1, \"task\"", 1);
        let e = ExperimentConfig::from_json(&text).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("colour"), "{e}");
        let nested = VISION.replace("\"epochs\": 2", "\"epochs\": 2, \"momentum\": 0.9");
        assert!(ExperimentConfig::from_json(&nested).unwrap_err().to_string().contains("momentum"));
    }

    #[test]
    fn task_and_model_must_agree() {
        let text = VISION.replace("linear_softmax", "voxel_linear");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut c = ExperimentConfig::from_json(VISION).unwrap();
        c.set_seed(77);
        assert_eq!(c.shift.as_ref().unwrap().seed, 77);
        assert_eq!(c.train.seed, 77);
    }
}
