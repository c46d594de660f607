//! Data-enabled policy optimization (DeePO) for linear quadratic tracking.

// `!(x < tol)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod matops;

pub use error::{Error, Result};
pub mod lqt;
pub mod opt;
pub mod param;
pub mod plant;
