//! Concept erasure for conditional diffusion models on synthetic worlds.

pub mod adversary;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod seed;
pub mod theory;
pub mod trainer;
pub mod world;

pub use error::{FadeError, Result};
