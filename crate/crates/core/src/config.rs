//! The run configuration: one JSON document in which every field is
//! optional, so `{}` describes the default desk-scale setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, RainParams};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{AdamConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Validate and checkpoint every this many iterations.
    pub val_every: u64,
    /// Optional external weights for the loss feature extractor.
    pub feature_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 1000, lr_init: 2e-4, lr_final: 1e-6, val_every: 100, feature_weights: None }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule { lr_init: self.lr_init, lr_final: self.lr_final, total_iters: self.iterations }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rain: RainParams,
    pub data: DataConfig,
    pub adam: AdamConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical JSON (fields in declaration order, no whitespace).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rain.validate()?;
        self.adam.validate()?;
        self.train.schedule().validate()?;
        if self.data.batch_size == 0 || self.data.crop == 0 {
            return Err(Error::Config("batch_size and crop must be positive".into()));
        }
        if self.train.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        Ok(())
    }

    /// Sets the initialization, data and rain seeds to `seed`. The feature
    /// extractor seed is left alone since it defines the loss.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.init_seed = seed;
        self.model.data_seed = seed;
        self.rain.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn json_round_trip_and_partial_override() {
        let cfg = RunConfig::from_json(r#"{"model": {"lambda": 0.0}, "train": {"iterations": 5}}"#).unwrap();
        assert_eq!(cfg.model.lambda, 0.0);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"base_channels": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"rain": {"alpha": 2.0}}"#).is_err());
    }
}
