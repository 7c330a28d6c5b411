//! Disentanglement lab: synthetic multi-domain data, a conditional-flow VAE
//! with a sparse-mixing penalty, evaluation metrics and identifiability checks.

pub mod cgvae;
pub mod error;
pub mod flows;
pub mod metrics;
pub mod numerics;
pub mod synthgen;
pub mod theory;

pub use error::{Error, Result};
