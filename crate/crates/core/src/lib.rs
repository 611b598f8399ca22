//! One-shot Hangul glyph generation with a conditional denoising diffusion model.

pub mod conditioning;
pub mod container;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod extractor;
pub mod hangul;
pub mod image;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
