//! Dense tensors, reverse-mode differentiation, AdamW and seeded randomness.

mod optim;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use rng::{derive_seed, Rng};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
