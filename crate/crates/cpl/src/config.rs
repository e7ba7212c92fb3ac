//! Run configuration: one strict JSON document covering training, evaluation,
//! and data generation, plus the seed-resolution ladder and the effective
//! config echo written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SEED_ENV_VAR: &str = "CPL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub samples_per_task: usize,
    pub mismatch: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { samples_per_task: 100, mismatch: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSettings {
    /// Number of degraded/clean pairs, assigned to tasks round-robin.
    pub count: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        GenSettings { count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub gen: GenSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.samples_per_task == 0 {
            return Err(Error::Config("eval.samples_per_task must be positive".into()));
        }
        Ok(())
    }
}

/// Parse and validate; `None` yields the documented defaults. Unknown keys
/// are rejected with the offending key named.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading config {}", p.display()), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The CPL_SEED environment override, if set (and a valid u64).
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={text:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: `--seed` flag, then the config file, then the CPL_SEED
/// environment variable, then 0. The resolved value is written back so the
/// effective-config echo and checkpoints always carry a concrete seed.
pub fn resolve_seed(cfg: &mut RunConfig, cli_seed: Option<u64>) -> Result<u64> {
    let resolved = match (cli_seed, cfg.train.seed) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => env_seed()?.unwrap_or(0),
    };
    cfg.train.seed = Some(resolved);
    Ok(resolved)
}

/// Write the fully resolved configuration next to a run's outputs.
pub fn write_effective_config(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join("effective_config.json");
    let mut text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("serializing effective config: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}
