//! Human-in-the-loop trajectory planning with semi-supervised Bayesian
//! optimization over an autoencoder latent space.

pub mod bo;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod feedback;
pub mod geometry;
pub mod gp;
pub mod latent;
pub mod seeds;
pub mod service;
pub mod planners;

pub use error::{Error, Result};
