use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] krecon::Error),

    /// A verification suite ran to completion and found failures.
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::ConfigSyntax { .. } | CliError::Config(_) | CliError::Format { .. } => {
                EXIT_USAGE
            }
            CliError::Core(e) => match e {
                krecon::Error::DimensionMismatch { .. } | krecon::Error::InvalidInput(_) | krecon::Error::ZeroNormInput => {
                    EXIT_USAGE
                }
                _ => EXIT_NUMERICAL,
            },
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}
