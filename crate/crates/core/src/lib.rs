//! Ejection-fraction regression from echocardiography clips: a differentiable
//! stacked-disk geometry engine, a landmark-guided video model with its own
//! reverse-mode autodiff, data loading, training and evaluation.

// NaN must fail the range checks, so negated comparisons are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
