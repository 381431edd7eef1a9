//! Experiment configuration: a JSON document with strict schema validation
//! and dotted-path command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config schema error: {0}")]
    Schema(String),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Synthetic data generation knobs. Geometry (channels/classes/length) lives
/// in [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_domain: usize,
    /// Single scalar in [0,1] interpolating all target-domain shift
    /// parameters.
    pub shift_knob: f64,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_per_domain: 600,
            shift_knob: 0.6,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub classes: usize,
    pub len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            classes: 5,
            len: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub calibration_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            calibration_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            adapt: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Schema("seeds list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.data.shift_knob) {
            return Err(ConfigError::Schema(format!(
                "shift_knob {} outside [0,1]",
                self.data.shift_knob
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(ConfigError::Schema(format!(
                "train_fraction {} outside (0,1)",
                self.data.train_fraction
            )));
        }
        if self.data.n_per_domain < 4 {
            return Err(ConfigError::Schema("n_per_domain too small".into()));
        }
        if self.model.classes < 2 || self.model.channels < 1 || self.model.len < 8 {
            return Err(ConfigError::Schema(format!(
                "bad model geometry: {:?}",
                self.model
            )));
        }
        if self.eval.calibration_bins < 2 {
            return Err(ConfigError::Schema("need at least 2 calibration bins".into()));
        }
        self.pretrain
            .validate()
            .map_err(|e| ConfigError::Schema(e.to_string()))?;
        self.adapt
            .validate()
            .map_err(|e| ConfigError::Schema(e.to_string()))?;
        Ok(())
    }

    /// Parse JSON text, apply `--set key.path=value` overrides, validate.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, overrides)
    }
}

/// Apply one `key.path=value` override to a JSON document. The value is
/// parsed as JSON when possible (numbers, booleans, arrays), else taken as a
/// bare string.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Schema(format!("override '{spec}' is not KEY=VALUE")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(ConfigError::Schema(format!(
                "override path '{path}' descends into a non-object at '{part}'"
            )));
        }
        let map = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("empty override path");
}
