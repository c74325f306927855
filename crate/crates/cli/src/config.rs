//! JSON configs for each subcommand. Every field has a default; unknown
//! fields are rejected.

use std::path::{Path, PathBuf};

use esacert::attention::{EsaConfig, PartitionDesc};
use esacert::theory::LogitModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::commands::RunError;

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, RunError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::spec(format!("{}: {e}", path.display())))
}

pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    if a == 0 || b == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((a, b))
}

/// 16 queries: 4 edit, 12 other of which the last 4 are restored; 6 keys:
/// 4 object, 2 background.
pub fn default_partition() -> PartitionDesc {
    PartitionDesc {
        n_queries: 16,
        edit: (0..4).collect(),
        effect: Vec::new(),
        other: (4..16).collect(),
        restore: (12..16).collect(),
        n_keys: 6,
        object_keys: (0..4).collect(),
        background_keys: vec![4, 5],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub partition: PartitionDesc,
    /// Defaults to `1/|edit|`.
    pub rho: Option<f64>,
    pub epsilon: f64,
    pub esa: EsaConfig,
    pub trials: usize,
    pub model: LogitModel,
    pub m_grid: Vec<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            partition: default_partition(),
            rho: None,
            epsilon: 0.0,
            esa: EsaConfig::default(),
            trials: 100,
            model: LogitModel::default(),
            m_grid: vec![10.0, 20.0, 40.0, 80.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub partition: PartitionDesc,
    pub rho: Option<f64>,
    pub epsilon: f64,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub model: LogitModel,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            partition: default_partition(),
            rho: None,
            epsilon: 0.0,
            alphas: vec![0.1, 0.5, 1.0],
            trials: 100,
            model: LogitModel::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnmapConfig {
    pub logits: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub layout: Option<(usize, usize)>,
    pub keys: Vec<usize>,
    pub esa: EsaConfig,
    /// Pixels per query cell in the emitted PNG.
    pub cell: usize,
    /// File-name stem; defaults to the logits file stem.
    pub stem: Option<String>,
}

impl Default for AttnmapConfig {
    fn default() -> Self {
        Self {
            logits: None,
            partition: None,
            layout: None,
            keys: Vec::new(),
            esa: EsaConfig::default(),
            cell: 16,
            stem: None,
        }
    }
}
