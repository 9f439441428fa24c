use das_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DasError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {message}")]
    Json { context: String, message: String },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("side mismatch: model is `{expected}`, input is `{got}`")]
    SideMismatch { expected: String, got: String },
    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
    #[error("unknown {side} entity `{id}`")]
    UnknownEntity { side: String, id: String },
    #[error("non-finite loss term `{term}` at step {step}: {breakdown}")]
    NonFiniteLoss { term: String, step: u64, breakdown: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
}

pub type Result<T, E = DasError> = std::result::Result<T, E>;

impl DasError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DasError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn json(context: impl Into<String>, e: impl std::fmt::Display) -> Self {
        DasError::Json { context: context.into(), message: e.to_string() }
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DasError::Json { .. }
                | DasError::Invalid(_)
                | DasError::SideMismatch { .. }
                | DasError::InsufficientSamples { .. }
                | DasError::UnknownEntity { .. }
                | DasError::Checkpoint(_)
                | DasError::DegenerateLabels(_)
        )
    }
}
