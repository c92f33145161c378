//! Trajectory-aware structured pruning for diffusion denoisers.
//!
//! The reverse trajectory is split into three stages from closed-form
//! schedule analytics ([`schedule`], [`trajectory`]). Each stage gets its own
//! sub-network, pruned with second-order group saliency on stage-matched
//! calibration data ([`calibration`], [`pruner`]). Sampling dispatches every
//! denoiser call to the sub-network of the stage it falls in ([`pipeline`]).
//! [`toydiffusion`] provides a small transformer denoiser to run it all on.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod pruner;
pub mod schedule;
pub mod toydiffusion;
pub mod trajectory;

pub use error::{Error, Result};
