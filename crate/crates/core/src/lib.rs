//! Toy-scale camouflaged-object segmentation with a from-scratch numeric core.
//!
//! The crate is organized around one pipeline: two stand-in encoders produce
//! feature pyramids from a dual-scale input, a grafting stage fuses the
//! same-resolution pairs, a dense bottom-up decoder emits a coarse map, and a
//! distractor-aware stage refines it while predicting false-negative and
//! false-positive regions. Losses, foreground-map metrics, a synthetic data
//! generator, and a deterministic training loop round out the artifact.
//!
//! Everything runs on [`tensor::Tensor`], a dense f64 array with reverse-mode
//! differentiation, so every gradient in the pipeline can be (and is) checked
//! against central finite differences.

pub mod checks;
pub mod data;
pub mod distractor;
pub mod encoders;
pub mod fusion;
pub mod grafting;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};

use thiserror::Error;

/// Crate-wide error type. `Invalid` covers rejected inputs and bad
/// configuration; `Numerical` covers NaN losses and failed gradient checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
