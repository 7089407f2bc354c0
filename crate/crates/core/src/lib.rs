//! Block compressive sensing with cascaded reconstruction networks.
//!
//! Two networks share a reconstruction design: an FC layer maps `m`
//! measurements of a `B x B` block back to `B^2` pixels, and conv stacks
//! refine the result. [`CsrNetParams`] samples with a fixed random
//! orthonormal matrix; [`AsrNetParams`] learns its sampling layer.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the precision: `f64` for gradient checks, `f32` for
//! training and inference.

pub mod error;
pub mod evaluation;
pub mod fileio;
pub mod gradcheck;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod pnm;
pub mod rng;
pub mod scalar;
pub mod sensing;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use models::{Architecture, AsrNetParams, CsrNetParams, Model, Network, StackShape, TensorSet};
pub use scalar::Scalar;
pub use sensing::{MeasurementMatrix, SensingConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type CsrNet32 = CsrNetParams<f32>;
pub type CsrNet64 = CsrNetParams<f64>;
pub type AsrNet32 = AsrNetParams<f32>;
pub type AsrNet64 = AsrNetParams<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
