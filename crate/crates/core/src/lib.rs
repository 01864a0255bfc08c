//! Maximum-coverage design of novel items from a latent rating model.
//!
//! Pipeline: generate or load a ratings dataset, train a latent model
//! (linear or variational), discretize the latent space into candidate items,
//! pick the `K` candidates that cover the most users above a rating
//! threshold, and evaluate the picks.

pub mod checkpoint;
pub mod config;
pub mod coverage;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linear_model;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod train;
pub mod vae_model;

pub use error::{Error, Result};
