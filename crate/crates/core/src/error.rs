use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u32, classes: usize },

    #[error("parse error in {path:?} at byte {offset}: {message}")]
    Parse {
        path: Option<PathBuf>,
        offset: usize,
        message: String,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: None,
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 = usage/config, 2 = data, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Json(_) => 1,
            Error::Parse { .. }
            | Error::LabelRange { .. }
            | Error::Generation(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => 2,
            Error::NonFinite { .. }
            | Error::Degenerate(_)
            | Error::Dimension { .. }
            | Error::InvalidShape { .. } => 3,
        }
    }
}
