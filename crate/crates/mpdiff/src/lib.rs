//! Multi-fidelity physics-guided denoising diffusion for 2D fields.
//!
//! The crate trains a compact conditional denoiser on cheap simulator outputs
//! and refines samples at inference time with gradient guidance from more
//! expensive simulator outputs. It ships two desk-scale experiments — a
//! buoyancy-driven smoke solver and a synthetic laser melt-pool process — plus
//! the metrics and analytic sampling checks used to validate the sampler.
//!
//! Entry points:
//! - [`fields`]: grid primitives (pooling, warping, interpolation, masks).
//! - [`diffusion`]: noise schedule, denoiser with hand-derived gradients,
//!   training loop, checkpoints.
//! - [`sampler`]: deterministic reverse sampling, guidance models, ensembles.
//! - [`fluidsim`] / [`thermal`]: the two data-generating processes.
//! - [`metrics`]: MSE/PSNR/SSIM, flow consistency, Wasserstein estimators.
//! - [`cli`]: config-driven commands behind the `mpdiff` binary.

// negated comparisons are used deliberately so NaN inputs fail validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod fields;
pub mod fluidsim;
pub mod io;
pub mod metrics;
pub mod sampler;
pub mod thermal;

pub use error::{Error, Result};
