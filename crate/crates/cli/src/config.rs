//! Run configuration: built-in defaults, overridden by a TOML or JSON file,
//! overridden by command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use hiccap::data_model::{Dims, ModalityOrdering};
use hiccap::ingest::PartitionSpec;
use hiccap::model::{ModelConfig, Task};
use hiccap::pretrain::PretrainConfig;
use hiccap::train_eval::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Root seed; every sub-stream (split, init, corruption, shuffling)
    /// derives from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub pretraining: PretrainConfig,
    pub split: PartitionSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Multitask,
            seed: 0,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            pretraining: PretrainConfig::default(),
            split: PartitionSpec::default(),
        }
    }
}

/// Flags that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub ordering: Option<ModalityOrdering>,
}

pub fn parse_config(text: &str, toml_syntax: bool) -> Result<RunConfig> {
    if toml_syntax {
        toml::from_str(text).context("parsing TOML config")
    } else {
        serde_json::from_str(text).context("parsing JSON config")
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let is_toml = p.extension().is_some_and(|e| e == "toml");
                parse_config(&text, is_toml).map_err(|e| crate::InputError(format!("{}: {e:#}", p.display())))?
            }
        };
        if let Some(t) = overrides.task {
            cfg.task = t;
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = overrides.ordering {
            cfg.model.ordering = o;
        }
        cfg.training.seed = cfg.seed;
        cfg.pretraining.seed = cfg.seed;
        cfg.split.seed = cfg.seed;
        if let Some(cap) = thread_cap() {
            cfg.training.eval_threads = cfg.training.eval_threads.min(cap).max(1);
        }
        Ok(cfg)
    }

    /// Model configuration with feature widths taken from the dataset.
    pub fn model_for(&self, dims: Dims) -> ModelConfig {
        ModelConfig {
            dims,
            ..self.model.clone()
        }
    }
}

/// Worker-thread cap from `HCA_THREADS`.
pub fn thread_cap() -> Option<usize> {
    std::env::var("HCA_THREADS").ok()?.trim().parse().ok()
}
