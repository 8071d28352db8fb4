use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input that violates its domain (non-finite logit, bad probability).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Shape or length mismatch between inputs that must agree.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("sample `{sample_id}` not found in backend `{model_id}`")]
    MissingSample { model_id: String, sample_id: String },

    #[error("backend `{model_id}` unavailable: {reason}")]
    BackendUnavailable { model_id: String, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// The training loss evaluated to NaN or infinity.
    #[error("non-finite loss ({0})")]
    PoisonedLoss(String),

    #[error("training collapsed: every batch of epoch {epoch} was skipped")]
    TrainingCollapse { epoch: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("sample `{sample_id}`: {source}")]
    AtSample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in a probability backend.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            Error::MissingSample { .. } | Error::BackendUnavailable { .. } => true,
            Error::AtSample { source, .. } => source.is_backend_failure(),
            _ => false,
        }
    }

    pub(crate) fn at_sample(self, sample_id: &str) -> Self {
        match self {
            e @ Error::AtSample { .. } => e,
            e => Error::AtSample {
                sample_id: sample_id.to_string(),
                source: Box::new(e),
            },
        }
    }
}
