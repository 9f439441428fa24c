//! Deterministic dense-tensor arithmetic with reverse-mode differentiation.
//!
//! The substrate is deliberately small: row-major tensors, a linear tape of
//! eager operations, a stop-gradient marker, a seeded PCG-64 generator, an
//! SGD/AdamW optimizer and a central-difference gradient checker. There is no
//! broadcasting beyond a row bias.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{finite_diff_check, CheckOptions, CheckStatus, GradCheckReport, ParamCheck};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use param::{ParamStore, Parameter};
pub use real::Real;
pub use rng::SeededRng;
pub use tape::{sigmoid, CandidateRow, Gradients, Tape, Var};
pub use tensor::{dot, dot_and_cosine, squared_distance, Tensor};
