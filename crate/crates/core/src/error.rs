use std::path::PathBuf;

use rmot_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid model configuration: {0}")]
    ModelConfig(String),
    #[error("tracker state is not initialized")]
    Uninitialized,
    #[error("scene generation failed for seed {seed}: {reason}")]
    SceneGeneration { seed: u64, reason: String },
    #[error("no valid referring expression for scene: {0}")]
    NoValidQuery(String),
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite attack loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid attack configuration: {0}")]
    AttackConfig(String),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("missing checkpoint {0} and training is disabled")]
    MissingCheckpoint(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
