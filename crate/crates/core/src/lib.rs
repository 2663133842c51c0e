//! Gaze-based binary classification with a hybrid spatial-temporal encoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense 2-D tensors with reverse-mode autodiff, plus
//!   [`optim`], [`gradcheck`] and [`checkpoint`] around them;
//! - [`gaze`]: scanpath ingestion, preprocessing and the seeded synthetic
//!   cohort generator;
//! - [`features`]: hand-engineered spatial/temporal gaze descriptors;
//! - [`vit`], [`ssm`], [`fusion`], [`model`]: the encoder stack and
//!   multimodal classification head;
//! - [`train`], [`eval`], [`ablate`]: splitting, the training loop,
//!   metrics/ROC and the ablation harness.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the shipped
//! pipeline uses the `f64` aliases below.

pub mod ablate;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod gaze;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use rng::StreamKey;

/// Scalar type used by the shipped pipeline.
pub type Real = f64;
/// Tensor type used by the shipped pipeline.
pub type RealTensor = tensor::Tensor<f64>;
