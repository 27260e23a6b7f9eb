#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod accounting;
pub mod autograd;
pub mod checks;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mmdg;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod skeleton;
pub mod strb;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
