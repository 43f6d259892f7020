//! Automated clustering of vehicle-trajectory risk features.
//!
//! The crate covers the whole chain: NGSIM trajectory ingestion, surrogate
//! safety indicators, a registry of clustering algorithms, validity indices,
//! elimination-based feature selection, TPE-driven tuning and decoding of the
//! final partition into ordered risk levels.

pub mod autotune;
pub mod clustering;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod indicators;
pub mod pipeline;
pub mod selection;
pub mod serde_float;
pub mod synthetic;
pub mod trajectory;

pub use error::{Error, Result};
