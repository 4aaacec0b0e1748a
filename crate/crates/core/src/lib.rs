//! Diffusion-based adversarial purification for visual tracking imagery.

pub mod attacks;
pub mod conv;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod losses;
pub mod norm;
pub mod params;
pub mod purifier;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
