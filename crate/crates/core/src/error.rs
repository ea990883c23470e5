use std::io;

/// Errors produced by the mining, training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("non-finite data")]
    NonFinite,

    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version")]
    UnsupportedVersion,

    #[error("truncated payload")]
    Truncated,

    #[error("label block length mismatch: expected {expected}, found {found}")]
    LabelLength { expected: usize, found: usize },

    #[error("sample count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tau1 < tau2 required")]
    TauOrder,

    #[error("labels required")]
    MissingLabels,

    #[error("empty negative set")]
    EmptyNegativeSet,

    #[error("empty positive set for anchor {0}")]
    EmptyPositiveSet(usize),

    #[error("no unlabeled samples")]
    NoUnlabeled,

    #[error("diverged")]
    Diverged,

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
