use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward: {0}")]
    Backward(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt container ({reason})")]
    Corrupt { path: PathBuf, reason: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("frozen parameter modified: {0}")]
    FrozenViolation(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for machine-parseable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Backward(_) => "backward",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Corrupt { .. } => "corrupt",
            Error::MissingInput(_) => "missing_input",
            Error::Diverged(_) => "diverged",
            Error::FrozenViolation(_) => "frozen_violation",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
