//! Run configuration shared by the command-line tools.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TrainConfig;
use crate::pipeline::PipelineConfig;
use crate::synth::PhantomParams;

/// Cohort generation and cross-validation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_cases: usize,
    pub base_seed: u64,
    pub k_folds: usize,
    pub fold_seed: u64,
    pub phantom: PhantomParams,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { n_cases: 27, base_seed: 0, k_folds: 9, fold_seed: 0, phantom: PhantomParams::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// Optimizer settings and loss weights (`train.loss`).
    pub train: TrainConfig,
    pub cohort: CohortConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(context, e))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::from_file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Every violation at once, as a single `Error::Config`.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.pipeline.validate(&mut errors);
        self.train.validate(&mut errors);
        self.cohort.phantom.validate(&mut errors);
        let c = &self.cohort;
        if c.n_cases == 0 {
            errors.push("cohort.n_cases must be at least 1".into());
        }
        if c.k_folds < 2 {
            errors.push(format!("cohort.k_folds must be at least 2, got {}", c.k_folds));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json(), "t").unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#, "t").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.pipeline, PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#, "t").is_err());
    }

    #[test]
    fn all_violations_reported_together() {
        let mut c = RunConfig::default();
        c.train.lr = -1.0;
        c.train.loss.alpha = -2.0;
        c.cohort.k_folds = 1;
        c.pipeline.target_dims = [30, 32, 32];
        match c.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 4, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }
}
