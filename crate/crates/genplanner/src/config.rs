//! Service configuration, read from a TOML file.
//!
//! ```toml
//! host = "127.0.0.1"
//! port = 8080
//! data_dir = "data"
//! k = 8
//! sigma = 0.1
//! seed = 13
//!
//! [checkpoints]
//! generator_kind = "hier"
//! generator = "checkpoints/hier.json"
//! reward = "checkpoints/reward.json"
//! encoder = "checkpoints/encoder.json"
//! dataset = "dataset"
//!
//! [grid]
//! n = 16
//! categories = 10
//! zones = 5
//! levels = 5
//! ```
//!
//! Relative checkpoint paths resolve against `data_dir`. The
//! `GENPLANNER_DATA_DIR` environment variable overrides `data_dir`.

use std::path::{Path, PathBuf};

use genplanner_core::GeneratorKind;
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "GENPLANNER_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPaths {
    pub generator_kind: GeneratorKind,
    pub generator: PathBuf,
    pub reward: PathBuf,
    pub encoder: PathBuf,
    /// Synthetic dataset whose sample ids are accepted as context ids.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDefaults {
    pub n: usize,
    pub categories: usize,
    pub zones: usize,
    pub levels: usize,
}

impl Default for GridDefaults {
    fn default() -> Self {
        Self { n: 16, categories: 10, zones: 5, levels: 5 }
    }
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_k() -> usize {
    8
}

fn default_sigma() -> f64 {
    0.1
}

fn default_seed() -> u64 {
    13
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub data_dir: PathBuf,
    pub checkpoints: CheckpointPaths,
    #[serde(default)]
    pub grid: GridDefaults,
    /// Candidates drawn per turn.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Condition perturbation used to diversify candidates.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// TOML integers are signed, so seeds above `i64::MAX` cannot be written.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, applies the data-dir override from the environment and
    /// validates the result.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            config.data_dir = PathBuf::from(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.data_dir.join(path)
        }
    }

    pub fn generator_path(&self) -> PathBuf {
        self.resolve(&self.checkpoints.generator)
    }

    pub fn reward_path(&self) -> PathBuf {
        self.resolve(&self.checkpoints.reward)
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.resolve(&self.checkpoints.encoder)
    }

    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.checkpoints.dataset.as_deref().map(|p| self.resolve(p))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ConfigError::Invalid("sigma must be finite and >= 0".into()));
        }
        let g = self.grid;
        if g.n == 0 || g.categories == 0 || g.zones == 0 || g.levels == 0 {
            return Err(ConfigError::Invalid("grid defaults must be positive".into()));
        }
        let mut required = vec![self.generator_path(), self.reward_path(), self.encoder_path()];
        required.extend(self.dataset_path());
        for path in required {
            if !path.exists() {
                return Err(ConfigError::Invalid(format!("`{}` does not exist", path.display())));
            }
        }
        Ok(())
    }
}
