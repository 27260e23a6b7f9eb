//! Differentiable operations recorded on a [`Tape`](crate::Tape).

mod act;
mod conv;
mod elem;
mod linalg;
mod loss;
mod norm;
mod pool;

pub use act::{log_softmax_rows, softmax_rows};
pub use conv::Conv2dSpec;
pub use norm::{BatchStats, RunningStats, BN_EPS, BN_MOMENTUM};
