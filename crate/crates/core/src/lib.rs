//! Mixture-of-experts continual learning with frequency-based expert merging.

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod inference;
pub mod merge;
pub mod moe;
pub mod numerics;
pub mod tasks;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
