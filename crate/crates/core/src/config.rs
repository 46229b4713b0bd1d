//! Run configuration as a single JSON document. Every section is optional and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::featurizers::FeaturizerConfig;
use crate::hierarchy::SyntheticConfig;
use crate::model::ModelConfig;
use crate::prompting::PromptTable;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Used when the dataset file does not pin the featurizer.
    pub featurizer: FeaturizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prompts: PromptTable,
    pub synthetic: SyntheticConfig,
    /// Parameter initialisation seed.
    pub init_seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        self.prompts.validate()?;
        self.synthetic.validate()?;
        self.train.validate()
    }

    /// Sets every seed that influences a run.
    pub fn reseed(&mut self, seed: u64) {
        self.init_seed = seed;
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.patience, TrainConfig::default().patience);
    }
}
