//! Three-stage Holter ECG interpretation: beat segmentation, wide/narrow
//! beat classification and patient-wise gradient-boosted stacking.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cls;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gbdt;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod seg;
pub mod signal_io;
pub mod train;

pub use error::{Error, Result};
