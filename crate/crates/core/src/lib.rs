pub mod attention;
pub mod autograd;
pub mod bench;
pub mod control;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod kernels;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pose;
pub mod prompt;
pub mod tensor;
pub mod tensor_io;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
