//! Run configuration: one TOML document covering model geometry, objectives,
//! masking, optimization and data locations. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MaskingConfig;
use crate::encoders::{write_atomic, ModelConfig};
use crate::error::{CloverError, Result};
use crate::losses::LossHyper;
use crate::training::TrainConfig;

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest written by `gen-data`.
    pub manifest: Option<PathBuf>,
    /// Raw clip directory; clips are re-rendered from their scenes when absent.
    pub clips: Option<PathBuf>,
    /// Question records for VQA fine-tuning and evaluation.
    pub qa: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossHyper,
    pub masking: MaskingConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CloverError::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CloverError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CloverError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss
            .validate()
            .map_err(|e| CloverError::Config(e.to_string()))?;
        self.train.validate()?;
        for (name, r) in [
            ("video_ratio", self.masking.video_ratio),
            ("text_ratio", self.masking.text_ratio),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CloverError::Config(format!(
                    "masking.{name} = {r} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| CloverError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }
}
