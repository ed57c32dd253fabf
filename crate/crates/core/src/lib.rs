//! Latent flow matching for PDE surrogates.

pub mod ae;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod evaluate;
mod error;
pub mod models;
pub mod paths;
pub mod sampler;
pub mod spectral;
pub mod training;

pub use error::{CoreError, Result};
