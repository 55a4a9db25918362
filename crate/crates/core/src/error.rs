use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("tensor data contains a non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },

    #[error("non-finite gradient for parameter `{param}` at epoch {epoch}, step {step}")]
    NonFiniteGradient {
        param: String,
        epoch: usize,
        step: usize,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("class index {index} out of range for {n_classes} classes")]
    ClassIndex { index: usize, n_classes: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("transport problem has {entries} cost entries, above the exact-solver cap of {cap}; use sinkhorn instead")]
    TransportCap { entries: usize, cap: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } | Error::ClassIndex { .. } => 1,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 3,
            Error::Shape { .. }
            | Error::NonFiniteInput { .. }
            | Error::Io { .. }
            | Error::Format(_)
            | Error::Version { .. }
            | Error::Dataset(_)
            | Error::TransportCap { .. } => 2,
        }
    }
}
