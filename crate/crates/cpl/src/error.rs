//! Crate-wide error type. Variants map onto the CLI exit codes: config
//! problems exit 2, numeric failures exit 3, I/O and file-format damage exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss term `{term}` is non-finite at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward was already called on this tape")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got {len} elements")]
    BackwardNonScalar { len: usize },

    #[error("gradient check failed: worst relative error {worst:.3e} in {op}")]
    GradCheckFailed { op: String, worst: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed file {path}: {detail}")]
    FileFormat { path: String, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a human-readable context string to an I/O error.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// Process exit code for the CLI. 2 = config, 3 = numeric, 4 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::ShapeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::TapeConsumed
            | Error::BackwardNonScalar { .. }
            | Error::GradCheckFailed { .. } => 3,
            Error::Checkpoint(_) | Error::FileFormat { .. } | Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
