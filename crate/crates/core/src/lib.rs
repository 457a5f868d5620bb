//! Bi-temporal land-cover change detection that learns to ignore
//! phenological (seasonal) pseudo-changes.
//!
//! The crate is organized as:
//!
//! - [`scenegen`]: deterministic synthetic scenes with planted true changes and
//!   seasonal pseudo-changes, dataset splits and the on-disk layout.
//! - [`diffcore`]: reverse-mode tensors, SGD with momentum, checkpoints.
//! - [`detector`]: twin extractor, differential attention, spatial pyramid and
//!   change head.
//! - [`constrainer`]: the training-time losses (change BCE, semantic CE,
//!   pixel/region contrastive, phenology-aware contrastive) and the
//!   per-class centroid clusterer.
//! - [`orchestrator`]: three-stage training, validation and evaluation.
//! - [`metrics`]: cumulative confusion matrix and precision/recall/F1/IoU.
//! - [`verify`]: independent oracles and gradient checks.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! verification); the aliases below fix the element type.

pub mod config;
pub mod constrainer;
pub mod detector;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod orchestrator;
pub mod scalar;
pub mod scenegen;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = diffcore::Graph<f32>;
pub type Graph64 = diffcore::Graph<f64>;
pub type ParamStore32 = diffcore::ParamStore<f32>;
pub type ParamStore64 = diffcore::ParamStore<f64>;
pub type Network32 = constrainer::Network<f32>;
pub type Network64 = constrainer::Network<f64>;
