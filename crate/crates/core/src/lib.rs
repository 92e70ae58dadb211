//! Wavelet-domain photo enhancement, end to end and from scratch.
//!
//! The crate splits an image into a one-level wavelet decomposition, runs a
//! channel-attention transformer over the low-frequency band and a small UNet
//! over the three high-frequency bands, recombines, and finishes with a
//! globally conditioned per-pixel refinement. Training, evaluation, and the
//! reverse-mode autodiff underneath are all implemented here; the only
//! external numerics are the scalar-trait plumbing from `num-traits`.
//!
//! Everything numeric is generic over [`scalar::Scalar`], instantiated as
//! `f32` for training speed and `f64` for verification work such as gradient
//! checking. The aliases at the crate root pin those two instantiations.

pub mod adam;
pub mod checkpoint;
pub mod color;
pub mod config;
pub mod dataset;
pub mod dpr;
pub mod error;
pub mod gradcheck;
pub mod gsr;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::{Shape, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = Tape<f32>;
/// Verification-precision tape.
pub type Tape64 = Tape<f64>;
