use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the workbench.
#[derive(Debug, Error)]
pub enum KtError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("channel/variant mismatch: expected {expected}, found {found}")]
    Mismatch { expected: String, found: String },

    #[error("interrupted after {0} completed units")]
    Interrupted(usize),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = KtError> = std::result::Result<T, E>;

impl KtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KtError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        KtError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the `kt` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            KtError::Config(_) | KtError::Json(_) | KtError::Invalid(_) | KtError::Mismatch { .. } => 2,
            KtError::Missing(_) | KtError::Corrupt { .. } | KtError::Io { .. } => 3,
            KtError::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
