pub mod container;
pub mod divergence;
pub mod error;
pub mod finetune;
pub mod mininet;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
