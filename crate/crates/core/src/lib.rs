//! Character-guided diffusion restoration of license plate images.
//!
//! The crate bundles a small reverse-mode tensor library, a synthetic plate
//! renderer and degradation pipeline, character prior extraction, region
//! masked cross-attention, a toy conditional U-Net denoiser, the diffusion
//! schedule and samplers, evaluation metrics and the command-line driver.
//!
//! Model math is generic over [`numerics::Scalar`]; the aliases below pin the
//! two supported precisions.

pub mod charm;
pub mod charprior;
pub mod cli;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod plates;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Tape64 = numerics::Tape<f64>;
