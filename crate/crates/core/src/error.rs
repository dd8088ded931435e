use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-trace: trace has no samples")]
    EmptyTrace,

    #[error("invalid-trace: {0}")]
    InvalidTrace(String),

    #[error("invalid-profile: {0}")]
    InvalidProfile(String),

    #[error("invalid-argument: {0}")]
    InvalidArgument(String),

    #[error("format-error: {path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("out-of-memory: cannot allocate {0} bytes")]
    OutOfMemory(usize),

    #[error("unsupported-technique: {0}")]
    UnsupportedTechnique(String),

    #[error("malformed-query: {0}")]
    MalformedQuery(&'static str),

    #[error("insufficient-records: need at least 2 records, found {0}")]
    InsufficientRecords(usize),

    #[error("insufficient-spikes: found {0}")]
    InsufficientSpikes(usize),

    #[error("invalid-spec: {0}")]
    InvalidSpec(String),

    #[error("folds-missing: {0}")]
    FoldsMissing(String),

    #[error("empty-report")]
    EmptyReport,

    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyTrace => "empty-trace",
            Error::InvalidTrace(_) => "invalid-trace",
            Error::InvalidProfile(_) => "invalid-profile",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Format { .. } => "format-error",
            Error::OutOfMemory(_) => "out-of-memory",
            Error::UnsupportedTechnique(_) => "unsupported-technique",
            Error::MalformedQuery(_) => "malformed-query",
            Error::InsufficientRecords(_) => "insufficient-records",
            Error::InsufficientSpikes(_) => "insufficient-spikes",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::FoldsMissing(_) => "folds-missing",
            Error::EmptyReport => "empty-report",
            Error::Io(_) => "io-error",
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
