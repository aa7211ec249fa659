use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DessError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("discount factor out of range: gamma = {0} (expected 0 < gamma <= 1)")]
    DiscountOutOfRange(f64),

    #[error("context norm {norm} exceeds bound U = {bound}")]
    ContextNorm { norm: f64, bound: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("arm index {arm} out of range for {arms} arms")]
    ArmIndex { arm: usize, arms: usize },

    #[error("reward {reward} outside [0, {max}]")]
    RewardOutOfRange { reward: f64, max: f64 },

    #[error("non-finite loss value")]
    NonFiniteLoss,

    #[error("id {id} already at the top rung")]
    TopRung { id: u64 },

    #[error("empty stream")]
    EmptyStream,

    #[error("synthetic environment: {0}")]
    Environment(String),

    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("{}:{line}: {msg}", .path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
