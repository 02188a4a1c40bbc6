use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for each outcome class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitCode {
    Ok = 0,
    Failure = 1,
    Validation = 2,
    Divergence = 3,
    AccusationExhausted = 4,
    MissingArtifact = 5,
    SelftestFailed = 6,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fltrace::Error),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("black-box accusation exhausted all {queries} triggers without accusing anyone")]
    Exhausted { queries: usize },

    #[error("{failed} selftest check(s) failed")]
    Selftest { failed: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use fltrace::Error as E;
        match self {
            CliError::Core(E::Config { .. } | E::InvalidParameter { .. } | E::DegenerateBias { .. } | E::ShapeMismatch(_) | E::Parse { .. }) => ExitCode::Validation,
            CliError::Core(E::NonFiniteLoss { .. }) => ExitCode::Divergence,
            CliError::Core(E::MissingFile(_)) | CliError::MissingArtifact { .. } => ExitCode::MissingArtifact,
            CliError::Validation(_) => ExitCode::Validation,
            CliError::Exhausted { .. } => ExitCode::AccusationExhausted,
            CliError::Selftest { .. } => ExitCode::SelftestFailed,
            CliError::Core(_) | CliError::Io(_) => ExitCode::Failure,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
