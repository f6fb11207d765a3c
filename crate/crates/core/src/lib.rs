pub mod cohort;
pub mod error;
pub mod experiment;
pub mod fidelity;
pub mod models;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
