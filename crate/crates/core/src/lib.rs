// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dsp;
pub mod error;
pub mod localize;
pub mod node;
pub mod qkd;
pub mod receiver;
pub mod report;
pub mod scenario;
pub mod sensing;
pub mod session;
pub mod signal;

pub use error::{Error, Result};
