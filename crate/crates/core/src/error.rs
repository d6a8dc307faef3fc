use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("template {template} expects {expected} slot(s), got {got}")]
    Template {
        template: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown id {0:?}")]
    Lookup(String),

    #[error("index {index} out of range for batch of {len}")]
    Index { index: usize, len: usize },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
