//! Run configuration as a TOML file with `[model]`, `[train]` and
//! `[sampling]` tables. Missing keys take their defaults; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FitError, Result};
use crate::model::{Method, ModelConfig};
use crate::sampling::SamplingPolicy;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Learned methods to train; baselines are evaluated without training.
    pub methods: Vec<Method>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::FitNet, Method::FitNetMinus, Method::AvgPoolDnn],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FitError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FitError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(FitError::config("no methods to train"));
        }
        if let Some(m) = self.methods.iter().find(|m| !m.is_learned()) {
            return Err(FitError::config(format!("{m} is a baseline and is not trained")));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.sampling.validate()
    }

    /// Routes one seed to model init, shuffling and negative sampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.shuffle_seed = seed;
        self.sampling.seed = seed;
        self
    }
}
