//! Hyperplane-assisted softmax separator loss with softmax and additive
//! angular margin baselines, a small MLP feature extractor, an SGD trainer,
//! and angular discrimination metrics for learned embeddings.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
