use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("timestep {t} out of range [1, {max}]")]
    Range { t: usize, max: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("format error in {path:?} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("integrity error in {path:?} at byte {offset}: {msg}")]
    Integrity {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("cache incompatible: {0}")]
    CacheIncompatible(String),

    #[error("index build failed: {0}")]
    Build(String),

    #[error("query failed: {0}")]
    Query(String),

    #[error("unknown sample id {0}")]
    Lookup(u64),

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse classification used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::Range { .. } | Error::Input(_) => ErrorKind::Usage,
            Error::Numeric(_) | Error::Training(_) | Error::UndefinedCorrelation(_) => {
                ErrorKind::Numeric
            }
            Error::Phase { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Error {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    pub fn integrity(
        path: impl Into<PathBuf>,
        offset: u64,
        msg: impl Into<String>,
    ) -> Error {
        Error::Integrity {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}
