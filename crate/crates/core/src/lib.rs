pub mod chain;
pub mod checkpoint;
pub mod codebook;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod scorer;
pub mod synth;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
