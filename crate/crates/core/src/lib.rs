//! Relevance-aware hard negative and hard positive mining for triplet-loss
//! video-text retrieval, with a small two-tower model, ranking metrics and
//! a seeded synthetic data generator.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod semantics;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
