pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod harness;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod query;
pub mod tensor;

pub use error::{Error, Result};
