use std::fs;
use std::path::{Path, PathBuf};

use mixhar_core::data::SplitSpec;
use mixhar_core::metrics::F1Average;
use mixhar_core::synth::SynthSpec;
use mixhar_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Dataset manifest JSON; relative paths resolve against the config
    /// file's directory.
    Manifest(PathBuf),
    Synth(SynthSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self::Synth(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub window_len: usize,
    pub overlap: f64,
    pub label_fraction: f64,
    pub f1_average: F1Average,
    /// Held-out subjects to evaluate; empty means every subject.
    pub folds: Vec<String>,
    pub deterministic: bool,
    pub save_checkpoints: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            window_len: 30,
            overlap: 0.5,
            label_fraction: 0.05,
            f1_average: F1Average::AllClasses,
            folds: Vec::new(),
            deterministic: false,
            save_checkpoints: false,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The labelled/unlabelled split reuses the training seed.
    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            label_fraction: self.label_fraction,
            seed: self.train.seed,
            window_len: self.window_len,
            overlap: self.overlap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split().validate()?;
        self.train.validate()?;
        if let DatasetSource::Synth(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| LabError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let DatasetSource::Manifest(m) = &mut cfg.dataset {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
