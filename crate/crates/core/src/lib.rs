pub mod autograd;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod selfcheck;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod tracker;

pub use error::{Error, Result};
pub use tensor::Tensor;
