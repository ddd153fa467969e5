//! Training runs, evaluation and analysis commands, and their on-disk artifacts.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod trainer;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::approximator::MlpError;
use crate::envs::EnvError;
use crate::replay::ReplayError;
use crate::sacd::SacdError;
use crate::shaping::ShapingError;

pub use config::{EvalConfig, RunConfig};
pub use trainer::{train, TrainOutcome};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    IoPlain(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written by a different config (hash mismatch)")]
    ConfigMismatch,
    #[error("missing {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sacd(#[from] SacdError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
}

impl RunError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
