//! Command-line harness for `pfljscc-core`: configuration, dataset
//! ingestion, metrics CSV, checkpoints, SVG plots and experiment runners.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod plot;

pub use error::{HarnessError, Result};
