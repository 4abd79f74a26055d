//! Bayesian operator inference for quadratic reduced-order models.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Trajectory partitions are lists of ranges, often with one entry.
#![allow(clippy::single_range_in_vec_init)]

pub mod cli;
pub mod error;
pub mod euler;
pub mod gpclosure;
pub mod io;
pub mod linalg;
pub mod pod;
pub mod regression;
pub mod regselect;
pub mod rom;
pub mod tensorops;

pub use error::{Result, RomError};
