//! Learned task-specific projection-view sampling for sparse-view CT.

pub mod autodiff;
pub mod completion;
pub mod config;
pub mod container;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod recon;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
