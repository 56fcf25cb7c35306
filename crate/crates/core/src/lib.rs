//! Fairness-aware contrastive pretraining for small speech models:
//! autodiff, mel features, synthetic corpora, encoder, losses, training
//! loops, and evaluation, sized to run end to end on one CPU.
//!
//! The numeric substrate is generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix the pipeline-facing types at `f64`.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autograd::Tensor<f64>;
pub type MelSpectrogram = features::MelSpectrogram<f64>;
