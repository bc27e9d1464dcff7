use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op} requires a scalar loss, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },

    #[error("non-finite loss {loss} at step {step} (batch targets {targets:?})")]
    NonFinite {
        step: u64,
        loss: f64,
        targets: Vec<(usize, usize)>,
    },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("{0}")]
    Data(String),

    #[error("malformed {what} at byte {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
