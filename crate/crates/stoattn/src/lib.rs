//! Desk-scale transformer text classification with stochastic
//! self-attention and multi-run uncertainty estimation.
//!
//! The numeric kernel (tensors, autodiff, sampling, attention, model,
//! training) is generic over the scalar type via [`scalar::Scalar`]; the
//! aliases below pin the shipped pipeline to `f64`.

pub mod attention;
pub mod error;
pub mod sampling;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use sampling::RngStream;
pub use scalar::Scalar;

/// Default scalar type for the shipped pipeline.
pub type Real = f64;
/// Tensor at the default precision.
pub type Tensor = tensor::Tensor<Real>;
/// Autodiff tape at the default precision.
pub type Tape = tape::Tape<Real>;
/// Attention parameters at the default precision.
pub type AttentionParams = attention::AttentionParams<Real>;
/// Centroid set at the default precision.
pub type CentroidSet = attention::CentroidSet<Real>;
