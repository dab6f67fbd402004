pub mod autograd;
pub mod cli;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod layers;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
