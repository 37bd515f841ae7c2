// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod audio;
pub mod bench;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod imagination;
pub mod nn;
pub mod rng;
pub mod spandet;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
