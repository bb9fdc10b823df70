pub mod codebook;
pub mod datasetops;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pgraph;

pub use error::{Error, Result};
