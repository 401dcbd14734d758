//! JSON model-config schema.
//!
//! A config file describes a p-type branching model: one offspring law per
//! parent type, one immigration law, and an optional initial-state rule.
//! Configs are referenced by the SHA-256 hash of their canonical JSON in
//! every report, so a report always pins the exact model it was run on.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// One atom of a finite-support law.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AtomSpec {
    /// Offspring (or immigrant) count per type.
    pub vector: Vec<u64>,
    pub prob: f64,
}

/// Law specification as written in config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LawSpec {
    FiniteSupport { atoms: Vec<AtomSpec> },
    IndependentPoisson { rates: Vec<f64> },
}

/// Initial-state rule. `Ray` scales the Perron direction: the process of
/// index `n` starts from `round(scale · n · u)` coordinatewise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialState {
    Zero,
    Fixed { vector: Vec<u64> },
    Ray { scale: f64 },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Zero
    }
}

impl InitialState {
    /// Concrete integer start state for scaling index `n` with Perron
    /// direction `u`.
    pub fn resolve(&self, n: u64, u: &DVector<f64>) -> Vec<u64> {
        match self {
            InitialState::Zero => vec![0; u.len()],
            InitialState::Fixed { vector } => vector.clone(),
            InitialState::Ray { scale } => u
                .iter()
                .map(|&ui| (scale * n as f64 * ui).round().max(0.0) as u64)
                .collect(),
        }
    }
}

/// Parsed model config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub p: usize,
    pub offspring: Vec<LawSpec>,
    pub immigration: LawSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialState>,
}

impl ModelConfig {
    pub fn initial_state(&self) -> InitialState {
        self.initial.clone().unwrap_or_default()
    }

    /// SHA-256 of the canonical (compact) JSON serialization.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_str(text: &str) -> Result<ModelConfig, ConfigError> {
    Ok(serde_json::from_str(text)?)
}

/// Loads a config file and returns it together with its content hash.
pub fn load(path: &Path) -> Result<(ModelConfig, String), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let config = parse_str(&text)?;
    let hash = config.content_hash();
    Ok((config, hash))
}
