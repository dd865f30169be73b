//! The run configuration document shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imitation::{PpoConfig, RewardConfig};
use crate::sim::EnvConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub trajectories: usize,
    pub test_fraction: f64,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            trajectories: 8,
            test_fraction: 0.2,
            out_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub episodes: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            episodes: 100,
        }
    }
}

/// Strictly parsed: unknown keys anywhere are rejected. The top-level
/// `seed` drives every stage and replaces the nested `seed` fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root for every relative path.
    pub workspace: PathBuf,
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub repr: TrainConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workspace: PathBuf::from("."),
            seed: 0,
            env: EnvConfig::default(),
            data: DataConfig::default(),
            repr: TrainConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a JSON document, then propagate the seed.
    pub fn parse(bytes: &[u8]) -> Result<Self, ConfigError> {
        let mut c: RunConfig = serde_json::from_slice(bytes)?;
        c.validate()?;
        c.apply_seed();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&bytes)
    }

    pub fn apply_seed(&mut self) {
        self.repr.seed = self.seed;
        self.policy.ppo.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.env.validate() {
            return bad(format!("env: {e}"));
        }
        if self.data.trajectories == 0 {
            return bad("data.trajectories must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return bad("data.test_fraction must lie in [0, 1)".into());
        }
        if let Err(e) = self.repr.validate() {
            return bad(format!("repr: {e}"));
        }
        if self.repr.arch.resolution != self.env.resolution {
            return bad(format!(
                "repr.arch.resolution {} differs from env.resolution {}",
                self.repr.arch.resolution, self.env.resolution
            ));
        }
        if let Err(e) = self.policy.reward.validate() {
            return bad(format!("policy.reward: {e}"));
        }
        if let Err(e) = self.policy.ppo.validate() {
            return bad(format!("policy.ppo: {e}"));
        }
        if self.policy.episodes == 0 {
            return bad("policy.episodes must be positive".into());
        }
        Ok(())
    }

    /// `p` itself if absolute, else joined onto the workspace root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workspace.join(p)
        }
    }
}
