//! Crate-wide error type.

use thiserror::Error;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite intermediate value after coupling layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        /// Parameters at the end of the last epoch with a finite loss.
        checkpoint: Box<crate::flow::FlowModel>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is not supported for an unbounded region")]
    Unbounded(&'static str),

    #[error("zero variance in column {column}")]
    ZeroVariance { column: usize },

    #[error("malformed data at row {row}: {message}")]
    Malformed { row: usize, message: String },

    #[error("index {index} appears in more than one data subset")]
    Overlap { index: usize },

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            got,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Config,
            Error::Shape { .. }
            | Error::Empty(_)
            | Error::ZeroVariance { .. }
            | Error::Malformed { .. }
            | Error::Overlap { .. }
            | Error::Csv(_) => ErrorKind::Data,
            Error::NonFinite(_)
            | Error::NonFiniteLayer { .. }
            | Error::Diverged { .. }
            | Error::Unbounded(_)
            | Error::Singular(_) => ErrorKind::Numeric,
            Error::Io(_) | Error::Json(_) => ErrorKind::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
