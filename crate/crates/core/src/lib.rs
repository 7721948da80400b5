//! Diffusion policies on SE(3) with invariant and equivariant denoising.
//!
//! * [`se3`] and [`gaussian`]: Lie-group numerics and Gaussians on SE(3).
//! * [`schedule`] and [`diffusion`]: forward perturbation, training targets and reverse inference.
//! * [`denoiser`]: the frame regressor and the oracle model.
//! * [`markov`] and [`learnability`]: finite-group checks of the equivariant Markov chain
//!   and a small invariant-vs-equivariant training comparison.
//! * [`tasks`] and [`evalkit`]: synthetic demonstrations and rollout evaluation.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod gaussian;
pub mod learnability;
pub mod markov;
pub mod rng;
pub mod schedule;
pub mod se3;
pub mod tasks;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
