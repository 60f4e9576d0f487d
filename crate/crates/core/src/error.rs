use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DdnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DdnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular system: estimated rank {rank} of {dim}")]
    Singular { rank: usize, dim: usize },

    #[error("non-finite function value at component {index}")]
    Evaluation { index: usize },

    #[error("training diverged in {group} at epoch {epoch}")]
    Divergence { group: String, epoch: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing prerequisite: {stage} checkpoint not found at {path}")]
    Dependency { stage: String, path: PathBuf },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed for block {block}: relative error {error:.3e}")]
    GradientCheck { block: String, error: f64 },
}

impl DdnError {
    pub fn shape(msg: impl Into<String>) -> Self {
        DdnError::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DdnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DdnError::Config(_) | DdnError::Parse { .. } | DdnError::Format(_) => 2,
            DdnError::Io { .. } => 3,
            DdnError::Contract(_)
            | DdnError::Dependency { .. }
            | DdnError::Shape(_)
            | DdnError::Domain(_)
            | DdnError::Singular { .. }
            | DdnError::Evaluation { .. } => 4,
            DdnError::Divergence { .. } => 5,
            DdnError::GradientCheck { .. } => 6,
        }
    }
}
