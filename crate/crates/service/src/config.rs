//! Run configuration, read from one TOML file.

use std::path::{Path, PathBuf};

use cogs_core::eval::EvalConfig;
use cogs_core::pipeline::{PipelineConfig, SamplingParams};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Environment variable naming the configuration file.
pub const CONFIG_ENV: &str = "COGS_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory holding the model checkpoints and embedding indices.
    pub model_dir: PathBuf,
    /// Directory holding the corpus manifest.
    pub data_dir: PathBuf,
    pub server: ServerConfig,
    /// Defaults for requests that do not set their own sampling parameters.
    pub sampling: SamplingParams,
    /// Interpolants survive when their quality score is at most this multiple
    /// of the worst real-image score of the class.
    pub quality_multiplier: f64,
    /// Size of the diverse-style shortlist per class.
    pub style_shortlist: usize,
    pub training: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_dir: "models".into(),
            data_dir: "data".into(),
            server: ServerConfig::default(),
            sampling: SamplingParams::default(),
            quality_multiplier: 1.5,
            style_shortlist: 5,
            training: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.sampling.temperature <= 0.0 || self.sampling.top_k == 0 {
            return Err(ServiceError::Config("sampling needs temperature > 0 and top_k >= 1".into()));
        }
        if self.quality_multiplier <= 0.0 {
            return Err(ServiceError::Config("quality_multiplier must be positive".into()));
        }
        if self.style_shortlist == 0 {
            return Err(ServiceError::Config("style_shortlist must be positive".into()));
        }
        Ok(())
    }

    /// Fails unless the checkpoints and manifest the server needs are present.
    pub fn check_files(&self) -> Result<(), ServiceError> {
        for path in [self.model_dir.join("pipeline.json"), self.data_dir.join("manifest.json")] {
            if !path.is_file() {
                return Err(ServiceError::Config(format!("missing {}", path.display())));
            }
        }
        Ok(())
    }
}
