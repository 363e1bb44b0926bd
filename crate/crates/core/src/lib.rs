pub mod checkpoint;
pub mod codebook;
pub mod dataset;
pub mod descriptors;
pub mod downstream;
pub mod env;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod mat;
pub mod nn;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
