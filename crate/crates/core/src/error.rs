use crate::autodiff::{AdError, CheckpointError};
use crate::lie::LieError;
use crate::pointcloud::CloudError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("normal equations not positive definite even with damping {lambda:e}")]
    NotPositiveDefinite { lambda: f64 },
    #[error("every frame in the graph is fixed")]
    AllFramesFixed,
    #[error("expected {expected} frames, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("need {needed} frames to initialize, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("motion model needs at least one previous pose")]
    EmptyHistory,
    #[error("invalid frame graph: {0}")]
    Graph(String),
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },
    #[error("trajectories differ in length: {predicted} vs {truth}")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("trajectory too short for any evaluation length")]
    TrajectoryTooShort,
    #[error("degenerate registration: {0}")]
    Degenerate(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Error {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Numerical failures, as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::NonFiniteLoss { .. } | Error::Lie(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
