//! Differentiable architecture search for long-tailed image classification.

pub mod audit;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod etf;
pub mod experiments;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rebalance;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
