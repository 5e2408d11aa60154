use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A vector or embedding collapsed to (numerically) zero norm.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// A batch, dataset or family that violates its size contract.
    #[error("invalid size: {0}")]
    InvalidSize(String),

    /// Exhaustive enumeration was refused because the instance is too large.
    #[error("enumeration guard exceeded: {what} = {value} > {limit}")]
    GuardExceeded {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("non-finite value: {0}")]
    Numeric(String),

    /// Optimizer state used out of order (for example a zero statistic).
    #[error("invalid optimizer state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training aborted at a given step.
    #[error("training aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse(_)
            | Error::InvalidSize(_)
            | Error::GuardExceeded { .. } => 2,
            Error::Io { .. } => 3,
            Error::Numeric(_) | Error::Degenerate(_) | Error::State(_) => 4,
            Error::Aborted { source, .. } => source.exit_code(),
            Error::DimensionMismatch { .. } | Error::IndexOutOfRange { .. } => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
