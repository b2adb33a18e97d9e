//! Satellite-to-street-view synthesis: a small deterministic diffusion + GAN toolkit,
//! a procedural cross-view dataset, evaluation metrics and a staged training pipeline.

pub mod adversarial;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod graft;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod unet;

pub use error::{Error, Result};
pub use image::{ImageTensor, ResizeMode, ValueRange};
pub use rng::{RngState, RngStream};
