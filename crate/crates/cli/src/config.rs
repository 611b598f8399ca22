use std::path::Path;

use jamodiff::model::ModelConfig;
use jamodiff::training::TrainConfig;
use jamodiff::Error;
use serde::{Deserialize, Serialize};

/// Everything a training run is configured by; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Parses a `.toml` or `.json` file. Also reports whether the file sets
    /// `model.denoiser.image_size` itself.
    pub fn load(path: &Path) -> jamodiff::Result<(Self, bool)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let bad = |m: String| Error::InvalidConfig(format!("{}: {m}", path.display()));
        let value: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string()))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?,
            _ => return Err(bad("expected a .toml or .json file".into())),
        };
        let explicit_size = value.pointer("/model/denoiser/image_size").is_some();
        let cfg = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        Ok((cfg, explicit_size))
    }
}
