//! Run configuration: one TOML document with a table per stage. Every field
//! is optional and falls back to its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{A2cConfig, CollectConfig};
use crate::counterfactual::{CfConfig, HighlightConfig, KeyFrameConfig};
use crate::error::{Error, Result};
use crate::genmodel::GenArch;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub agent: A2cConfig,
    pub collect: CollectConfig,
    pub arch: GenArch,
    pub train: TrainConfig,
    pub cf: CfConfig,
    pub highlight: HighlightConfig,
    pub keyframes: KeyFrameConfig,
    pub baseline: BaselineConfig,
    pub pipeline: PipelineConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Records indexed by the nearest-neighbour baseline.
    pub nn_records: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { nn_records: 100_000 }
    }
}

/// Artifacts produced by `evaluate` and reused by later runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub replays: usize,
    /// Fraction of the dataset (whole episodes) held out for evaluation.
    pub holdout: f64,
    /// Adversarial weight of the comparison model whose encoder is left free.
    pub ablated_lambda: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { replays: 4, holdout: 0.1, ablated_lambda: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    pub workers: usize,
    pub cache_entries: usize,
    pub model_dir: Option<PathBuf>,
    /// Append-only log of user annotations; defaults to `annotations.jsonl`
    /// inside the model directory.
    pub annotation_log: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { port: 8787, workers: 2, cache_entries: 256, model_dir: None, annotation_log: None }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_tables_override_only_named_fields() {
        let c = Config::from_toml("seed = 7\n[train]\nlambda = 0.0\n[cf]\nmax_steps = 10\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.lambda, 0.0);
        assert_eq!(c.train.epochs, TrainConfig::default().epochs);
        assert_eq!(c.cf.max_steps, 10);
        assert_eq!(c.cf.step_size, CfConfig::default().step_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("[train]\nlamda = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("sed = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut c = Config::default();
        c.serve.model_dir = Some("models".into());
        c.keyframes.min_gap = 5;
        assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
