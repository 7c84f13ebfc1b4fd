//! Guided visual question generation: text pipeline, datasets, the
//! encoder-decoder model, training, decoding, and evaluation metrics.

pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod text;
pub mod training;

pub use error::{Error, Result};
