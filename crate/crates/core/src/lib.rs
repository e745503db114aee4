//! Multi-stage Saak transform: data-driven KLT kernels with sign-to-position
//! augmentation, cross-entropy feature selection, and lightweight classifiers.
//!
//! The crate is organized along the processing pipeline:
//!
//! - [`dataset`]: MNIST/CIFAR-10/STL-10 ingestion, tensor files, heatmap export
//! - [`kernel`]: per-stage kernel fitting (DC vector, correlation, eigenbasis)
//! - [`transform`]: forward/inverse stages, pooling, cascades
//! - [`select`]: histogram cross-entropy maps and spatial/spectral selection
//! - [`classifier`]: multinomial logistic regression and a one-hidden-layer MLP
//! - [`pipeline`]: end-to-end experiment orchestration

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod pipeline;
pub mod select;
pub mod tensor;
pub mod transform;

pub use error::{Result, SaakError};
