pub mod cli;
pub mod conditioner;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod schedule;

pub use error::{Error, Result};
