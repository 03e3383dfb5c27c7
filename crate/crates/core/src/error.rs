use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("unknown dataset family `{0}`")]
    UnknownFamily(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated or mis-sized payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("mask padding bits are nonzero")]
    CorruptPadding,

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("backbone digest mismatch: file expects {expected:#018x}, backbone is {found:#018x}")]
    DigestMismatch { expected: u64, found: u64 },

    #[error("class count mismatch: domain has {domain}, dataset has {dataset}")]
    ClassMismatch { domain: usize, dataset: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
