//! CPU inference engine for CLIP vision transformers with layer/head
//! diagnostics and training-free dense-prediction interventions.

pub mod container;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod imaging;
pub mod parity;
pub mod segmentation;
pub mod strategies;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
