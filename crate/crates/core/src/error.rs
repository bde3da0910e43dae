use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at {stage} {step}: loss is not finite")]
    Divergence { stage: &'static str, step: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("point {index}: {source}")]
    AtPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::AtPoint { source, .. } => source.is_numerical(),
            other => matches!(
                other,
                Error::NonFinite(_) | Error::Divergence { .. } | Error::Degenerate(_)
            ),
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::AtPoint { source, .. } => source.is_io(),
            other => matches!(other, Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_)),
        }
    }

    pub(crate) fn at_point(index: usize, source: Error) -> Self {
        Error::AtPoint {
            index,
            source: Box::new(source),
        }
    }
}
