//! Post-training quantization for a toy diffusion model.
//!
//! The crate trains a small time-conditioned denoiser on 2-D toy
//! distributions, quantizes its weights and activations with uniform fake
//! quantization, groups sampling timesteps so that each group shares one
//! activation quantizer per layer (group assignment found by differentiable
//! search), and actively selects which timesteps to draw calibration data
//! from. Sample quality is tracked with a kernel two-sample discrepancy.
//!
//! Modules:
//!
//! - [`numerics`] -- tensors, reverse-mode autodiff, Adam, seeded RNG
//! - [`diffusion`] -- noise schedule, toy data, denoiser training, DDIM sampling
//! - [`quantizer`] -- uniform fake quantization and range calibration
//! - [`groupsearch`] -- differentiable timestep-group assignment
//! - [`calibration`] -- calibration-set construction and timestep selection
//! - [`metrics`] -- quantization errors and kernel MMD
//! - [`harness`] -- config, checkpoints, CLI-facing pipeline

pub mod calibration;
pub mod diffusion;
pub mod error;
pub mod groupsearch;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod quantizer;

pub use error::{Error, Result};
