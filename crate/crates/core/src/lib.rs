//! Few-step diffusion distillation on analytic Gaussian-mixture data.
//!
//! A teacher denoiser is fit to a known mixture, a few-step student is
//! initialised adversarially against a discriminator built on the frozen
//! teacher's features, and then refined by distribution matching under a
//! plain or softened reverse KL divergence. Because the data distribution is
//! analytic, every score, density ratio and divergence has an exact
//! reference to test against.

pub mod adversarial;
pub mod denoiser;
pub mod dmd;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod student;
pub mod teacher;
pub mod verify;

pub use error::{Error, Result};
