//! Run configuration: JSON file, environment overrides, run identity.
//!
//! Every knob lives in a section; `COGDOC_<SECTION>_<KEY>` environment
//! variables override individual keys (e.g. `COGDOC_PIPELINE_K=5`).
//! Unknown keys in the file are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::HttpEndpointConfig;
use crate::grpo::GrpoConfig;
use crate::orchestrator::{ExtractMode, PipelineOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("environment override {var} targets unknown section '{section}'")]
    UnknownSection { var: String, section: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub mode: BackendMode,
    /// Seed for the deterministic mock backend.
    pub seed: u64,
    /// Mock only: error on requests no script rule matches.
    pub strict: bool,
    /// Mock only: synthesize token logits and log-probs.
    pub emit_logits: bool,
    /// HTTP endpoints keyed by role name (policy, judge, generator,
    /// filterer, extractor, verifier).
    pub endpoints: BTreeMap<String, HttpEndpointConfig>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            seed: 0,
            strict: false,
            emit_logits: false,
            endpoints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TierSection {
    /// Pixel budget for the skim tier.
    pub low_px: u64,
    /// Pixel budget for the answering tier.
    pub high_px: u64,
}

impl Default for TierSection {
    fn default() -> Self {
        Self {
            low_px: crate::corpus::LOW_TIER_PIXELS,
            high_px: crate::corpus::HIGH_TIER_PIXELS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Maximum pages forwarded from stage 1 to stage 2.
    pub k: usize,
    pub fallback_on_empty: bool,
    pub overlay_page_numbers: bool,
    pub temperature: f64,
    /// Worker threads for batch runs.
    pub workers: usize,
    /// "rule" to take the last boxed span, "backend" to ask an extractor
    /// model.
    pub extract: String,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            k: 10,
            fallback_on_empty: false,
            overlay_page_numbers: true,
            temperature: 1.0,
            workers: 4,
            extract: "rule".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub run_seed: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { run_seed: 17 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub runs_dir: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendSection,
    pub tiers: TierSection,
    pub pipeline: PipelineSection,
    pub grpo: GrpoConfig,
    pub seeds: SeedSection,
    pub paths: PathSection,
}

pub const ENV_PREFIX: &str = "COGDOC_";

const SECTIONS: &[&str] = &["backend", "tiers", "pipeline", "grpo", "seeds", "paths"];

/// Apply `COGDOC_<SECTION>_<KEY>` overrides onto a raw config value. The
/// override value is parsed as JSON when possible and falls back to a
/// string, so `COGDOC_PIPELINE_K=5` and `COGDOC_PATHS_RUNS_DIR=out` both
/// work.
fn apply_env_overrides(
    value: &mut serde_json::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((section_raw, key_raw)) = rest.split_once('_') else {
            continue;
        };
        let section = section_raw.to_lowercase();
        let key = key_raw.to_lowercase();
        if !SECTIONS.contains(&section.as_str()) {
            return Err(ConfigError::UnknownSection { var: name, section });
        }
        let parsed = serde_json::from_str::<serde_json::Value>(&raw)
            .unwrap_or(serde_json::Value::String(raw));
        let obj = value
            .as_object_mut()
            .expect("config root is always an object");
        let entry = obj
            .entry(section)
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        entry
            .as_object_mut()
            .expect("config sections are objects")
            .insert(key, parsed);
    }
    Ok(())
}

impl Config {
    /// Parse a config from JSON text plus environment overrides.
    pub fn from_json_str(
        text: &str,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if !value.is_object() {
            return Err(ConfigError::Invalid("config root must be an object".into()));
        }
        apply_env_overrides(&mut value, vars)?;
        let config: Config = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    /// Load from a file, with `std::env::vars()` overrides. A missing path
    /// of "-" or empty file content means all defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text, std::env::vars())
    }

    /// Defaults plus environment overrides only.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_json_str("{}", std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pipeline.k == 0 {
            return Err(ConfigError::Invalid("pipeline.k must be >= 1".into()));
        }
        if self.tiers.low_px == 0 || self.tiers.high_px == 0 {
            return Err(ConfigError::Invalid("tier pixel budgets must be positive".into()));
        }
        if self.tiers.low_px > self.tiers.high_px {
            return Err(ConfigError::Invalid(
                "tiers.low_px must not exceed tiers.high_px".into(),
            ));
        }
        if !matches!(self.pipeline.extract.as_str(), "rule" | "backend") {
            return Err(ConfigError::Invalid(
                "pipeline.extract must be 'rule' or 'backend'".into(),
            ));
        }
        self.grpo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical JSON used for hashing; field order is fixed by the struct
    /// declarations.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("Config serializes")
    }

    /// Short stable hash of the effective configuration.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        crate::corpus::hex_digest(hasher)[..16].to_string()
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            k: self.pipeline.k,
            fallback_on_empty: self.pipeline.fallback_on_empty,
            overlay_page_numbers: self.pipeline.overlay_page_numbers,
            temperature: self.pipeline.temperature,
            extract: if self.pipeline.extract == "backend" {
                ExtractMode::Backend
            } else {
                ExtractMode::Rule
            },
            retry: crate::backend::RetryPolicy::default(),
            want_logits: self.backend.emit_logits,
        }
    }
}

/// Run identity: hash of effective config, seed and the canonicalized
/// input paths. Identical inputs always map to the same run directory.
pub fn run_id(config: &Config, seed: u64, inputs: &[&str]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.canonical_json().as_bytes());
    hasher.update(seed.to_le_bytes());
    for input in inputs {
        hasher.update([0u8]);
        hasher.update(input.as_bytes());
    }
    crate::corpus::hex_digest(hasher)[..16].to_string()
}
