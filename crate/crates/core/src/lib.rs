pub mod adapters;
pub mod compression;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
