//! Conditional Brownian bridge diffusion for SAR-to-optical translation.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
