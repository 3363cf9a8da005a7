use std::path::PathBuf;

use thiserror::Error;

/// Coarse grouping of failures, used by the command line front end to pick
/// an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    MissingArtifact,
    Numeric,
}

/// An entity whose offsets do not select its surface string.
#[derive(Debug, Error)]
#[error("{path}:{line}: span {start}..{end} of {pmid}/{eid} reads {found:?}, expected {expected:?}", path = .path.display())]
pub struct SpanMismatch {
    pub path: PathBuf,
    pub line: usize,
    pub pmid: String,
    pub eid: String,
    pub start: usize,
    pub end: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    SpanMismatch(Box<SpanMismatch>),

    #[error("{path}:{line}: relation argument {arg} of document {pmid} does not resolve: {msg}")]
    DanglingArgument {
        path: PathBuf,
        line: usize,
        pmid: String,
        arg: String,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Json { .. } => ErrorKind::Config,
            Error::MissingArtifact(_) => ErrorKind::MissingArtifact,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::MissingArtifact
            }
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
