//! Experiment configuration: a TOML document with one table per module,
//! dotted-key overrides, validation and a content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cgrpa::LearnerConfig;
use crate::env::BattleConfig;
use crate::flexdiff::SchedulerConfig;
use crate::harness::RunConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
    #[error("invalid value in [{section}]: {message}")]
    Invalid { section: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub env: BattleConfig,
    pub learner: LearnerConfig,
    pub flexdiff: SchedulerConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        resolve(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        resolve(&text, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, message: String| ConfigError::Invalid { section, message };
        self.run.validate().map_err(|e| invalid("run", e.to_string()))?;
        self.env.validate().map_err(|e| invalid("env", e.to_string()))?;
        if self.run.target_difficulty < self.flexdiff.d_min || self.run.target_difficulty > self.flexdiff.d_max {
            return Err(invalid("run", "target_difficulty outside [d_min, d_max]".into()));
        }
        self.learner.validate().map_err(|e| invalid("learner", e.to_string()))?;
        self.flexdiff.validate().map_err(|e| invalid("flexdiff", e.to_string()))?;
        Ok(())
    }

    /// Applies `section.key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        resolve(&self.to_toml(), overrides)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })
}

/// Splits `a.b=v` into the key path and the value, parsing the value as a
/// TOML literal and falling back to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn known_keys() -> toml::Value {
    toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

/// Parses `text`, applies the overrides, rejects unknown keys and validates.
pub fn resolve(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let known = known_keys();
    check_known(&toml::Value::Table(doc.clone()), &known, "")?;
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        let mut probe = &known;
        for part in &path {
            probe = probe
                .get(part)
                .ok_or_else(|| ConfigError::UnknownKey(path.join(".")))?;
        }
        let mut table = &mut doc;
        for part in &path[..path.len() - 1] {
            table = table
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ConfigError::BadOverride(spec.clone()))?;
        }
        // integers given for float fields are accepted as floats
        let value = match (probe, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(path[path.len() - 1].clone(), value);
    }
    let cfg: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_known(value: &toml::Value, known: &toml::Value, prefix: &str) -> Result<(), ConfigError> {
    if let (Some(table), Some(known_table)) = (value.as_table(), known.as_table()) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match known_table.get(k) {
                Some(kv) => check_known(v, kv, &key)?,
                None => return Err(ConfigError::UnknownKey(key)),
            }
        }
    }
    Ok(())
}

/// Loads a file (or the defaults when `path` is `None`) and applies overrides.
pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => read(p)?,
        None => String::new(),
    };
    resolve(&text, overrides)
}
