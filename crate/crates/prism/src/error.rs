//! Error type shared across the crate, with the process exit codes the CLI
//! maps each class to.

use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested op.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A caller violated an API contract (bad intrinsics, wrong tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad run configuration or command-line arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or parameter became non-finite during training.
    #[error("numeric failure at step {step}: {term} is not finite")]
    Numeric { step: u64, term: String },

    /// The stitching schedule was asked to do something it forbids.
    #[error("schedule violation: {0}")]
    Schedule(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 for i/o and configuration problems,
    /// 3 for numeric failures, 4 for schedule violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            Error::Schedule(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
