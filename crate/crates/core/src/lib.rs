//! Semantic segmentation of dental radiographs with an adapter-augmented
//! vision transformer and a masked-attention query decoder.

mod error;

pub use error::ModelError;

pub mod numkit;
pub mod datakit;
pub mod nn;
pub mod backbone;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod training;
