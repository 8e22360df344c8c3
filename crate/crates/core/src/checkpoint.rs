//! Policy persistence: a self-describing JSON dump of layer shapes and
//! row-major weight arrays, stamped with a format version and the config
//! hash of the producing experiment. Tuned checkpoints carry the backoff
//! matrix alongside the policy.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::policy::PolicyParameters;
use crate::rollout::BackoffMatrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint encode/decode failed: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub policy: PolicyParameters,
    /// Present on tuned checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backoffs: Option<BackoffMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tighten_scale: Option<f64>,
}

impl Checkpoint {
    pub fn plain(policy: PolicyParameters, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            policy,
            backoffs: None,
            tighten_scale: None,
        }
    }

    pub fn tuned(
        policy: PolicyParameters,
        backoffs: BackoffMatrix,
        tighten_scale: f64,
        config_hash: &str,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            policy,
            backoffs: Some(backoffs),
            tighten_scale: Some(tighten_scale),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let checkpoint: Checkpoint = serde_json::from_slice(&bytes)?;
        if checkpoint.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: checkpoint.format_version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(checkpoint)
    }
}
