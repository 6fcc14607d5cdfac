pub mod annotate;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod sampling;

pub use error::{Error, Result};
