// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cruse;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod real;
pub mod roomsim;
pub mod scenegen;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
