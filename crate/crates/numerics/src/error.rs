use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: zero-norm operand in row {row} (collapsed representation)")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{what}: non-finite value")]
    NonFinite { what: String },
    #[error("optimizer: NaN gradient in parameter `{0}`")]
    NanGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("loss function is not deterministic: {0} != {1}")]
    NonDeterministic(f64, f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
