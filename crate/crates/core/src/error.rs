use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OvcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OvcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("encoder unavailable: this encoder only serves cached embeddings")]
    EncoderUnavailable,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("certification metadata cache holds no known prompts")]
    EmptyCache,

    #[error("noise seed mismatch: {0}")]
    SeedMismatch(String),

    #[error("cache miss: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    CacheMiss(Vec<PathBuf>),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    MagicMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionUnsupported { found: u32, supported: u32 },

    #[error("truncated file: failed to read field `{field}`")]
    Truncated { field: String },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("covariance is not positive definite after jitter escalation (last jitter {jitter:e})")]
    NonPsd { jitter: f64 },

    #[error("no MVN parameters for input {0}")]
    MvnMissing(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OvcError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            OvcError::InvalidArgument(_)
            | OvcError::DimensionMismatch { .. }
            | OvcError::ConfigInvalid(_)
            | OvcError::EncoderUnavailable
            | OvcError::EmptyCache
            | OvcError::SeedMismatch(_) => 2,
            OvcError::CacheMiss(_) | OvcError::MvnMissing(_) => 3,
            OvcError::FingerprintMismatch(_)
            | OvcError::MagicMismatch { .. }
            | OvcError::VersionUnsupported { .. }
            | OvcError::Truncated { .. }
            | OvcError::ChecksumMismatch { .. }
            | OvcError::Corrupt(_)
            | OvcError::Json(_) => 4,
            OvcError::InsufficientSamples { .. } | OvcError::NonPsd { .. } | OvcError::Io(_) => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> OvcError {
    OvcError::InvalidArgument(msg.into())
}
