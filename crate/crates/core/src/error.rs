use thiserror::Error;

/// Crate-wide error type. Variants are grouped by how the CLI reports them:
/// configuration and validation problems exit with code 2, numerical
/// failures with code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("hierarchy violation at level {level}: input row {row} of the higher-fidelity dataset has no exact match among the lower-fidelity inputs")]
    HierarchyViolation { level: usize, row: usize },

    #[error("csv format error: {0}")]
    CsvFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }

    /// Prefix the message with the pipeline stage it came from, keeping the
    /// variant (and therefore the exit code) intact. Wrapped variants pass
    /// through unchanged.
    pub fn with_context(self, stage: &str) -> Error {
        match self {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{stage}: {m}")),
            Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("{stage}: {m}")),
            Error::CsvFormat(m) => Error::CsvFormat(format!("{stage}: {m}")),
            Error::Config(m) => Error::Config(format!("{stage}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{stage}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
