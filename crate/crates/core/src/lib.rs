//! Instruction-conditioned latent diffusion for image colorization.
//!
//! A frozen KL autoencoder maps RGB images to a small latent grid; a frozen
//! hash-embedding text encoder turns instructions into token embeddings; a
//! compact U-Net denoiser, conditioned on the grayscale latent and the
//! instruction, is fine-tuned to predict noise.

pub mod colorspace;
pub mod data;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
