//! Run settings from a flat TOML file, the environment and flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "LNTUNE_SEED";

/// Keys accepted in a `--config` file. Flags given on the command line win.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub head_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub lr_grid: Option<Vec<f64>>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub fisher_samples: Option<usize>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Reads `LNTUNE_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

/// Flag, then environment, then config file, then 0.
pub fn resolve_seed(flag: Option<u64>, env: Option<u64>, settings: &Settings) -> u64 {
    flag.or(env).or(settings.seed).unwrap_or(0)
}
