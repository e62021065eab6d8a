use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: Dims,
        rhs: Dims,
    },

    #[error("shape error: {0}")]
    ShapeMsg(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: Dims, rhs: Dims) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for this failure: 2 for data problems, 3 for
    /// numeric failures, 1 for everything attributable to the invocation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::File { .. } | Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
            Error::Shape { .. } | Error::ShapeMsg(_) | Error::Config(_) | Error::Contract(_) => 1,
        }
    }
}
