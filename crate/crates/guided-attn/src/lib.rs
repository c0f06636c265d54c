//! Mask-guided stepwise attention learning on synthetic 3D DCE-MRI phantoms.
//!
//! The crate is organized in layers:
//!
//! - [`numcore`] — dense tensors with reverse-mode autodiff plus the fixed
//!   signal operators (separable Gaussian blur, trilinear resampling).
//! - [`phantom`] — multi-cohort phantom generation and the preprocessing
//!   pipeline (phase selection, geometry standardization, intensity
//!   normalization, clinical encoding).
//! - [`model`] — the two-stage 3D transformer encoder with class-token
//!   pooling attention (early, mask-supervised; late, clinically modulated)
//!   and the classification head.
//! - [`training`] — composite losses, Adam with decoupled weight decay,
//!   per-stage early-stopped training, and the three-stage sequential runner.
//! - [`eval`] — classification metrics, unimodal/fusion baselines, and the
//!   leave-one-dataset-out experiment harness.
//! - [`cli`] — the `guided-attn` binary: generate / train / experiment /
//!   export-attention.

pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
