use std::path::PathBuf;

use thiserror::Error;

use crate::domain::PromptRole;
use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt is empty after canonicalization")]
    EmptyPrompt,
    #[error("prompt role mismatch: expected {expected:?}, found {found:?}")]
    RoleMismatch {
        expected: PromptRole,
        found: PromptRole,
    },
    #[error("prompt id collision for {0}: same id, different content")]
    PromptCollision(String),
    #[error("prompt parent {0} is not in the run history")]
    UnknownParent(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("insufficient samples for class {class:?}: need {needed}, have {available} (short by {})", needed - available)]
    InsufficientSamples {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("cannot decode image {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("error set is empty")]
    EmptyErrorSet,
    #[error("modification produced the parent prompt unchanged")]
    DegenerateModification,
    #[error("degenerate clusters: {0}")]
    DegenerateClusters(String),
    #[error(
        "run aborted: {failed} of {total} gateway calls failed terminally (limit {limit_pct:.0}%)"
    )]
    RunAborted {
        failed: usize,
        total: usize,
        limit_pct: f64,
    },
    #[error("not enough items for a review bundle: {0}")]
    InsufficientItems(String),
    #[error("ratings file rejected:\n{}", .0.join("\n"))]
    RatingsRejected(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
