pub mod data;
pub mod electric;
pub mod electra;
pub mod error;
pub mod mlm;
pub mod noise;
pub mod rng;
pub mod scoring;
pub mod tabular;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
