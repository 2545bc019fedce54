//! Semantic direction discovery on a layered latent space, trained by
//! contrasting deep-feature changes, with evaluation metrics and group-VAE
//! distillation, all against a differentiable toy generator.

pub mod adam;
pub mod bundle;
pub mod config;
pub mod error;
pub mod experiments;
pub mod groupvae;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod navigator;
pub mod ppm;
pub mod render;
pub mod tape;
pub mod toyworld;
pub mod trainer;

pub use error::{Error, Result};
