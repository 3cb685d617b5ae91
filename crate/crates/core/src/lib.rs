// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod droop;
pub mod engine;
pub mod error;
pub mod frames;
pub mod inner_control;
pub mod plant;
pub mod stability;

pub use error::{Error, Result};
