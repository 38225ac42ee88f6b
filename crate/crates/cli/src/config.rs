//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crpsrft_core::backbone::BackboneConfig;
use crpsrft_core::dynamics::SystemSpec;
use crpsrft_core::evaluation::EvalConfig;
use crpsrft_core::modulation::NoiseBranchConfig;
use crpsrft_core::training::TrainConfig;
use crpsrft_core::util::canonical_hash;

use crate::error::CliError;

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub backbone: BackboneConfig,
    pub noise: NoiseBranchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Loads `path` if given, otherwise the defaults, and applies a seed
    /// override.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if seed.is_some() {
            cfg.seed = seed;
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.system.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
    }

    /// Hash of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Hash of a command's configuration together with the identities of its
/// inputs.
pub fn run_hash(command: &str, cfg: &RunConfig, inputs: &[&str]) -> String {
    canonical_hash(&serde_json::json!({
        "command": command,
        "config": cfg.hash(),
        "inputs": inputs,
    }))
}
