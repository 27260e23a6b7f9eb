//! File formats, run configuration and the command implementations for
//! the part-stream action recogniser.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod runner;
pub mod skj;

pub use error::{Error, Result};
