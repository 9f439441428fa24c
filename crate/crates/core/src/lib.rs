//! Dual-aligned semantic IDs: residual quantizers for users and ads trained
//! jointly with a debiased two-tower CF model, tied together by contrastive
//! alignment losses.

pub mod alignment;
pub mod cf;
pub mod checkpoint;
pub mod dataset;
pub mod embio;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod kmeans;
pub mod mlp;
pub mod quantizer;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{DasError, Result};
pub use types::{EntityIndex, SemanticId, Side};
