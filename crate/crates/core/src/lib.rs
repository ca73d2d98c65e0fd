//! Experiment harness for progressive activation regularization (AL2).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub mod model;
pub mod al2;
pub mod checkpoint;
pub mod data;
pub mod analysis;
pub mod config;
pub mod run;
pub mod train;
pub mod gradcheck;
pub mod report;
