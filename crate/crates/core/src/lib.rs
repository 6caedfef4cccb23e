//! One-step diffusion deblurring on blur trajectories.
//!
//! Motion blur is treated as a forward process: a sharp frame is blurred by a
//! chain of ever longer kernels, and every blur level maps to a diffusion
//! timestep `t = (n − 1) · 20` for an `n`-frame average. A consistency-trained
//! ε-prediction denoiser then recovers the sharp latent from any point of the
//! trajectory in a single forward pass, optionally steered by a kernel-aware
//! control branch that also predicts the timestep.
//!
//! Module map:
//! - [`blur`]: kernel trajectories, per-pixel convolution, frame averaging.
//! - [`dataset`]: trajectory-grouped training sets and their manifest format.
//! - [`codec`]: image ↔ latent codecs and the 2× resize wrapper.
//! - [`schedule`], [`unet`]: noise schedule, reparameterizations, denoiser.
//! - [`control`]: kernel estimator, filter module, control branch, t-regressor.
//! - [`train`]: the three training stages.
//! - [`runtime`], [`metrics`]: one-step inference and evaluation.
//!
//! Numeric work runs on a small reverse-mode autograd engine ([`graph`]);
//! data-parallel loops go through [`par`], which falls back to sequential
//! execution when the `parallel` feature is disabled.

pub mod blur;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod control;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod runtime;
pub mod scenes;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
