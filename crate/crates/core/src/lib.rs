//! Polar-voxel semantic occupancy prediction at desk scale.
//!
//! Every numeric stage is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grp;
pub mod head;
pub mod metrics;
pub mod pdconv;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod voxelize;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{DualArray, Tensor};

pub type Array = Tensor<f64>;
pub type Array32 = Tensor<f32>;
pub type Volume = voxelize::FeatureVolume<f64>;
pub type Volume32 = voxelize::FeatureVolume<f32>;
pub type Params = pipeline::ParamStore<f64>;
pub type Params32 = pipeline::ParamStore<f32>;
