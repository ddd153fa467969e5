//! Influence and return-prediction diagnostics.

pub mod influence;
pub mod regression;
pub mod returns;

use thiserror::Error;

use crate::approximator::{MlpError, OptimError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("expected {expected} head weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("influence identity violated for head {head}: {definitional} vs {linear}")]
    InfluenceIdentity {
        head: usize,
        definitional: f64,
        linear: f64,
    },
    #[error("no influence snapshots in the log")]
    EmptyLog,
    #[error("runs disagree on the snapshot schedule at step {step}")]
    MisalignedRuns { step: u64 },
    #[error("{predictions} predictions for {returns} returns")]
    LengthMismatch { predictions: usize, returns: usize },
    #[error("window must be positive")]
    InvalidWindow,
    #[error("no trajectory is long enough for the window ({skipped} skipped)")]
    NoTrajectories { skipped: usize },
}
