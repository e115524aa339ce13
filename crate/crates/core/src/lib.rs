pub mod analysis;
pub mod config;
pub mod diversity;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod masking;
pub mod model;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Gradients, Scalar, Tape, Tensor, Var};
