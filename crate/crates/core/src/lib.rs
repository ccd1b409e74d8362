//! Score distillation through tractable Schrödinger-bridge posteriors.
//!
//! The crate is a desk-scale laboratory: analytic Gaussian-mixture priors
//! stand in for a pretrained text-to-image model, a tiny MLP with a
//! low-rank residual adapter stands in for the adapted denoiser, and small
//! differentiable 2D generators stand in for 3D representations.
//!
//! Module map:
//! - [`schedule`]: noise schedules, accumulated variances, time samplers
//! - [`gmm`] / [`score`]: analytic priors, noise predictors, guidance
//! - [`sde`]: forward/reverse VP SDE simulation
//! - [`bridge`]: bridge posterior, pinned-bridge SDE, degenerate factors
//! - [`nn`]: MLP with manual backprop, adapter, training objectives
//! - [`render`]: direct-field and 2D splat generators with VJPs
//! - [`distill`]: one-step target, SDS and bridge gradients, the run loop
//! - [`metrics`]: sliced Wasserstein-1 and RBF-MMD
//! - [`config`]: declarative run configuration
//! - [`sweep`]: runs over guidance weights and seeds, plateau statistics
//! - [`io`]: stamped JSONL, CSV and image writers
//! - [`verify`]: the self-check suite behind `tracelab verify`

pub mod bridge;
pub mod config;
pub mod distill;
pub mod error;
pub mod gmm;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod quad;
pub mod render;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod sde;
pub mod sweep;
pub mod verify;

pub use error::{Error, Result};
