//! Dual-branch human image forgery detector at desk scale.
//!
//! The crate provides the adaptive Laplacian-of-Gaussian residual bank and
//! its content-aware controller, a mixture-of-experts face branch, a
//! pluggable contextualized branch with a self-assessed confidence head,
//! confidence-aware fusion, a deterministic synthetic forgery corpus, ROC
//! metrics with brute-force oracles, and the three-stage training pipeline
//! that ties them together.

pub mod adalog;
pub mod arr;
pub mod config;
pub mod ctx;
pub mod datasynth;
pub mod error;
pub mod face;
pub mod fdiff;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use store::{load_checkpoint, save_checkpoint, ParameterStore};
pub use tensor::{gaussian_smooth, FeatureMap, GaussianSpec, Padding};
