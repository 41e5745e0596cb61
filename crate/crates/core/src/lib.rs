//! Super-resolution by an unrolled majorization-minimization iteration whose
//! proximal step is a trainable Encoder-Resnet-Decoder (ERD) denoiser.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file name the two instantiations.

pub mod degradation;
pub mod erd;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod solver;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ParamStore, Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ErdWeights32 = erd::ErdWeights<f32>;
pub type ErdWeights64 = erd::ErdWeights<f64>;
