//! Sparse-autoencoder laboratory: toy superposition data, randomly initialized
//! networks, SAE training, evaluation metrics and fuzzing-based
//! auto-interpretability scoring.

pub mod autointerp;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod experiments;
pub mod ingestion;
pub mod linalg;
pub mod metrics;
pub mod plot;
pub mod randomnets;
mod real;
pub mod rng;
pub mod sae;
pub mod toygen;

pub use dataset::ActivationDataset;
pub use error::{Error, Result};
pub use real::Real;
