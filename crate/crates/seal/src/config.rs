//! Run configuration: model + training + label settings plus data paths,
//! with a bundled preset registry and content hashing for checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Data locations consumed by the pipeline stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Raw training corpus (JSON-lines with documents/summary).
    pub input: Option<PathBuf>,
    /// Raw evaluation corpus.
    pub eval_input: Option<PathBuf>,
    /// Directory for vocabulary, preprocessed data, labels, checkpoints,
    /// metrics, and reports.
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Debug, Error)]
pub enum ConfigLoadError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Invalid(#[from] crate::model::ConfigError),
    #[error("unknown preset {0:?}; known presets: {1}")]
    UnknownPreset(String, String),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), crate::model::ConfigError> {
        use crate::model::ConfigError;
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invariant("batch_size must be positive".into()));
        }
        if self.train.max_steps == 0 {
            return Err(ConfigError::Invariant("max_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.dropout) {
            return Err(ConfigError::Invariant("dropout must be in [0, 1)".into()));
        }
        let lr = match self.train.schedule {
            crate::train::Schedule::Constant { lr } => lr,
            crate::train::Schedule::Rsqrt { lr, .. } => lr,
        };
        if lr <= 0.0 {
            return Err(ConfigError::Invariant("learning rate must be positive".into()));
        }
        if !(1..=2).contains(&self.train.labels.ngram) {
            return Err(ConfigError::Invariant("labels.ngram must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Stable content hash of the full configuration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bundled presets: paper-scale rows plus scaled-down desk variants.
pub fn presets() -> &'static BTreeMap<String, RunConfig> {
    static PRESETS: OnceLock<BTreeMap<String, RunConfig>> = OnceLock::new();
    PRESETS.get_or_init(|| {
        let map: BTreeMap<String, RunConfig> =
            serde_json::from_str(include_str!("../presets.json")).expect("bundled presets parse");
        for (name, cfg) in &map {
            cfg.validate().unwrap_or_else(|e| panic!("preset {name} invalid: {e}"));
        }
        map
    })
}

/// Loads a configuration from a preset name or a JSON file path, then
/// validates it.
pub fn load_config(name_or_path: &str) -> Result<RunConfig, ConfigLoadError> {
    if let Some(preset) = presets().get(name_or_path) {
        let mut cfg = preset.clone();
        cfg.preset = Some(name_or_path.to_string());
        cfg.validate()?;
        return Ok(cfg);
    }
    let path = PathBuf::from(name_or_path);
    if !path.exists() && !name_or_path.contains(['/', '.']) {
        let known = presets().keys().cloned().collect::<Vec<_>>().join(", ");
        return Err(ConfigLoadError::UnknownPreset(name_or_path.to_string(), known));
    }
    let body = fs::read_to_string(&path)
        .map_err(|source| ConfigLoadError::Io { path: name_or_path.to_string(), source })?;
    let cfg: RunConfig = serde_json::from_str(&body)
        .map_err(|e| ConfigLoadError::Parse { path: name_or_path.to_string(), msg: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}
