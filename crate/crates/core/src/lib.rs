// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod model;
pub mod proto;
pub mod supervision;
pub mod synth;
pub mod tensor;

pub use error::{GemtError, Result};
