pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod retrieval;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{FitError, Result};
