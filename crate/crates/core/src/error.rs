use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories shared by every stage of the pipeline.
///
/// The CLI maps [`ErrorKind`] onto process exit codes, so new variants must
/// be assigned a kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error for record {record}: {reason}")]
    Ingest { record: String, reason: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("filter design error: {0}")]
    Design(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Design(_) => ErrorKind::Config,
            Error::Numeric(_) | Error::Shape(_) => ErrorKind::Numeric,
            Error::Ingest { .. }
            | Error::Layout(_)
            | Error::Data(_)
            | Error::Split(_)
            | Error::Segmentation(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
