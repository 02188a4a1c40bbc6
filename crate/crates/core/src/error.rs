use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate bias probability {p} (must lie strictly inside (0, 1))")]
    DegenerateBias { p: f64 },

    #[error("degenerate carrier weights: projected norm is zero")]
    DegenerateWeights,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("oracle failed at query {index}: {reason}")]
    OracleFailure { index: usize, reason: String },

    #[error("parse error in {path} at byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
