use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] hfm_core::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numeric aborts, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use hfm_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Io(_) | E::Format(_) => 4,
                E::NonFinite(_)
                | E::RejectionExhausted { .. }
                | E::ZeroMomentum
                | E::SingularInertia { .. }
                | E::EmptyBatch => 3,
                E::InvalidState(_)
                | E::Shape { .. }
                | E::Unsupported(_)
                | E::Config(_)
                | E::TimestepOutOfRange { .. }
                | E::Mismatch(_) => 2,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
