//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate document id: {0}")]
    DuplicateDocId(String),
    #[error("malformed corpus record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown document id: {0}")]
    UnknownDocId(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no corruption rule matches the input")]
    NoRuleMatches,
    #[error("corpus too small: requested {requested}, achievable maximum {achievable}")]
    CorpusTooSmall { requested: usize, achievable: usize },
    #[error("dataset cannot be balanced: {0}")]
    Unbalanced(String),
    #[error("context of {context} tokens exceeds model maximum {max_seq}")]
    ContextOverflow { context: usize, max_seq: usize },
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("file format version {found} does not match expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
