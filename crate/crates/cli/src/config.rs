//! Flat key-value config file; command-line flags take precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use crate::UsageError;

/// A number, an array of numbers or a comma-separated string of numbers.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum NumList {
    One(f64),
    Many(Vec<f64>),
    Text(String),
}

impl NumList {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            NumList::One(v) => Ok(vec![*v]),
            NumList::Many(v) => Ok(v.clone()),
            NumList::Text(s) => parse_list(s),
        }
    }
}

/// Parses `"0.1, 1, inf"`.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<f64>()
                .map_err(|_| UsageError(format!("`{p}` is not a number")).into())
        })
        .collect()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub format: Option<String>,
    pub gap_seconds: Option<f64>,
    pub min_session_seconds: Option<f64>,
    pub fractions: Option<String>,
    pub split: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub columns: Option<String>,
    pub family: Option<String>,
    pub families: Option<String>,
    pub lambda: Option<NumList>,
    pub alpha: Option<NumList>,
    pub delta: Option<NumList>,
    pub trees: Option<NumList>,
    pub depth: Option<NumList>,
    pub learning_rate: Option<NumList>,
    pub epsilon: Option<f64>,
    pub max_iters: Option<usize>,
    pub threads: Option<usize>,
    pub lognormal: Option<bool>,
    pub model: Option<PathBuf>,
    pub part: Option<String>,
    pub kind: Option<String>,
    pub users: Option<usize>,
    pub min_sessions: Option<usize>,
    pub max_sessions: Option<usize>,
    pub sigma0: Option<f64>,
    pub sigma1: Option<f64>,
    pub beta: Option<NumList>,
    pub corruption_rate: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag value, else config value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Like [`pick`], but a missing value is a usage error naming the key.
pub fn require<T>(flag: Option<T>, file: Option<T>, key: &str) -> Result<T> {
    pick(flag, file).ok_or_else(|| {
        UsageError(format!(
            "missing `{key}`: pass --{} or set `{key}` in the config file",
            key.replace('_', "-")
        ))
        .into()
    })
}
