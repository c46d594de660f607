//! Configuration, experiment pipeline and verification reports for the
//! `deepo` command-line tool.

// `!(x < tol)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod experiment;
