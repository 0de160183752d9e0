//! Run configuration and the provenance stamped onto every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::DEFAULT_MAX_RETRIES;
use crate::digest::sha256_hex;
use crate::grade::FlagConfig;
use crate::prompting::{GradingOptions, PromptError, MAX_GRADING_TEMPERATURE};
use crate::score::Grid;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Settings that influence outputs. Paths and backend selection are
/// deliberately left to the command line so that the hash only changes
/// when behaviour does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model_id: String,
    pub temperature: f64,
    pub temperature_audit: Option<String>,
    pub parallelism: usize,
    pub max_retries: u32,
    pub grid_tenths: u32,
    pub high_variance_tenths: u32,
    pub ocr_suspect_lines: usize,
    pub ocr_leniency: bool,
    pub withhold_flagged: bool,
    /// Replaces the built-in grading principles when set.
    pub principles: Option<Vec<String>>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model_id: "gpt-4.1-mini".into(),
            temperature: 0.0,
            temperature_audit: None,
            parallelism: 8,
            max_retries: DEFAULT_MAX_RETRIES,
            grid_tenths: Grid::HALF_POINT.step_tenths(),
            high_variance_tenths: 5,
            ocr_suspect_lines: 4,
            ocr_leniency: true,
            withhold_flagged: true,
            principles: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: Config = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid(
                "parallelism must be at least 1".into(),
            ));
        }
        if Grid::from_tenths(self.grid_tenths).is_none() {
            return Err(ConfigError::Invalid(
                "grid_tenths must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(PromptError::TemperatureOutOfRange(self.temperature).into());
        }
        if self.temperature > MAX_GRADING_TEMPERATURE && self.temperature_audit.is_none() {
            return Err(PromptError::UnauditedTemperature(self.temperature).into());
        }
        if matches!(&self.principles, Some(p) if p.is_empty()) {
            return Err(PromptError::NoPrinciples.into());
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form, leaving out `parallelism`, which
    /// never changes what a run produces.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("parallelism");
        }
        sha256_hex(&serde_json::to_vec(&value).expect("config serializes"))
    }

    pub fn grid(&self) -> Grid {
        Grid::from_tenths(self.grid_tenths).unwrap_or(Grid::HALF_POINT)
    }

    pub fn flag_config(&self) -> FlagConfig {
        FlagConfig {
            high_variance_tenths: self.high_variance_tenths,
            grid: self.grid(),
            ocr_suspect_lines: self.ocr_suspect_lines,
        }
    }

    pub fn grading_options(&self) -> GradingOptions {
        GradingOptions {
            temperature: self.temperature,
            temperature_audit: self.temperature_audit.clone(),
            ocr_leniency: self.ocr_leniency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub template_version: String,
    pub config_hash: String,
}
