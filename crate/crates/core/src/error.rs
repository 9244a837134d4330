use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("no triples in {0}")]
    NoTriples(PathBuf),

    #[error("{kind} id {id} out of range (count {count})")]
    IdOutOfRange { kind: &'static str, id: u64, count: u64 },

    #[error("invalid file format at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("graph checksum mismatch: file has {found:016x}, graph is {expected:016x}")]
    ChecksumMismatch { expected: u64, found: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("every token slot is masked for entity {0}")]
    AllMasked(u32),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::NoTriples(_) => "no_triples",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::Format { .. } => "format",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::AllMasked(_) => "all_masked",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::EmptySplit(_) => "empty_split",
        }
    }
}
