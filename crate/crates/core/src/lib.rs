//! Desk-scale contrastive-generative pretraining for multi-lead physiological
//! signals paired with free-text reports.
//!
//! The pipeline combines masked signal reconstruction, masked text
//! reconstruction, representation disentanglement with an orthogonality
//! penalty, and cross-modal alignment (pairwise sigmoid + symmetric InfoNCE),
//! all built on a small reverse-mode differentiation engine that is generic
//! over the scalar type: `f32` for training, `f64` for gradient checks and
//! analytic oracles.

pub mod align;
pub mod config;
pub mod corpus;
pub mod disentangle;
pub mod ecg;
mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Check-precision tensor (gradient checks, oracles).
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = tape::Tape<f32>;
/// Check-precision tape.
pub type Tape64 = tape::Tape<f64>;
