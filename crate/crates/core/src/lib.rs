//! Hotel embeddings learned from click sessions and enriched with amenity
//! and geographic attributes.

pub mod catalog;
pub mod checkpoint;
pub mod coldstart;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod export;
pub mod matrix;
pub mod model;
pub mod sampler;
pub mod sessions;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
