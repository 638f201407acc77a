pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod spn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
