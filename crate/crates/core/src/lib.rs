//! Channel-aware dual-pipeline joint source-channel coding trained with
//! personalized federated learning, plus numerical checks of the
//! convergence bound that governs the federated protocol.
//!
//! The crate is `no_std` + `alloc` when the default `std` feature is
//! disabled. File formats, dataset ingestion and the CLI live in the
//! companion `pfljscc-harness` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod channel;
pub mod codec;
pub mod data;
pub mod error;
pub mod federation;
pub mod graph;
pub mod losses;
pub mod math;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use rng::{Purpose, RngStream, StreamId};
pub use tensor::Tensor;
