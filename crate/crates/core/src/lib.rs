// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod blackbox;
pub mod config;
pub mod data;
pub mod effect;
pub mod error;
pub mod rng;
pub mod stats;
pub mod optim;
pub mod synth;
pub mod treatment;
pub mod weighting;

pub use error::{Error, Result};
