use std::path::Path;

use serde::Deserialize;
use vmamba3d::arch::ModelConfig;
use vmamba3d::train::TrainConfig;
use vmamba3d::volume::SynthSpec;

use crate::Validation;

/// Contents of a `--config` file. Every section is optional; missing
/// sections and fields fall back to the built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub synth: Option<SynthSpec>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Validation(format!("config {}: {e}", path.display())).into())
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }

    pub fn train(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    pub fn synth(&self) -> SynthSpec {
        self.synth.clone().unwrap_or_default()
    }
}
