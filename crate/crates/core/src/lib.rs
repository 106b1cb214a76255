pub mod agent;
pub mod baselines;
pub mod config;
pub mod counterfactual;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod genmodel;
pub mod nn;
pub mod persistence;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
