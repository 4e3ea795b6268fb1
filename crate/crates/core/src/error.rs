//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the registration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no points: cannot fit grid bounds to empty input")]
    NoPoints,

    #[error("no overlap with map: every depth residual was skipped")]
    NoOverlap,

    #[error("frame '{0}' has an empty point cloud")]
    EmptyCloud(String),

    #[error("{path}:{location}: {msg}")]
    Parse {
        path: PathBuf,
        /// Line number for text formats, byte offset for binary formats.
        location: Location,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    #[error("non-finite {kind} residual (frame {frame}, element {index})")]
    NonFiniteResidual {
        kind: &'static str,
        frame: usize,
        index: usize,
    },

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("missing marker annotation: {0}")]
    MissingMarker(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

/// Position of a parse error within its file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    ByteOffset(u64),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::ByteOffset(o) => write!(f, "byte {o}"),
        }
    }
}

impl Error {
    pub fn parse(path: impl Into<PathBuf>, location: Location, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            location,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
