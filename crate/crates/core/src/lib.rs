//! Data-free knowledge distillation where synthetic images are tuned to the
//! student's current weaknesses through a joint class-and-rotation auxiliary
//! task.

pub mod autograd;
pub mod bank;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod selfsup;
pub mod synthesis;
pub mod tensor;

pub use error::{DfkdError, Result};
pub use tensor::{Scalar, Tensor};
