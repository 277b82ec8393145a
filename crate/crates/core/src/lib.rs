//! Pixel-space flow-matching diffusion with perceptual supervision.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode gradient tape
//! - [`flow`]: interpolation, time sampling, x→v conversion, flow-matching loss
//! - [`perception`]: frozen feature extractors, perceptual losses, noise gating
//! - [`denoiser`]: the conditional x-prediction transformer
//! - [`sampler`]: ODE solvers, timeshift grids, guidance
//! - [`checkpoint`]: named-tensor binary container
//! - [`trainer`]: AdamW, EMA, clipping, checkpoints, training loop
//! - [`data`]: procedural labeled shapes and image files
//! - [`metrics`]: feature-Fréchet distance, k-NN precision/recall
//! - [`config`]: flat key/value run configuration
//! - [`diagnostics`]: gradient, solver and invariant self-checks

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod perception;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
