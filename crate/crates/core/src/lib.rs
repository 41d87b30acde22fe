//! A small CPU-only CNN training engine built around explicit permutation
//! layers. The crate provides dense tensors with reverse-mode automatic
//! differentiation, the three shuffle mechanisms (spatial, patch-wise,
//! channel-wise) as differentiable layers with a reproducible randomness
//! contract, symbolic architecture specs with layer-replacement surgery and
//! parameter accounting, a CIFAR-format data pipeline plus synthetic task
//! generators, and an SGD training harness with scheme discipline.

pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod shuffle;
pub mod tape;
pub mod tensor;
pub mod testing;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;

/// Scalar element type. 64-bit by default; the `f32` feature switches the
/// whole engine to 32-bit for faster training runs.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;
