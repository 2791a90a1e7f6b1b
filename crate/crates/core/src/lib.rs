//! Temporal-graph link prediction with latent conditional diffusion augmentation.
//!
//! The crate is generic over the floating-point [`Scalar`]; training code
//! uses `f64` throughout and the aliases below name the common instantiations.

pub mod augment;
pub mod conda;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

/// Training-precision scalar.
pub type Real = f64;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
