//! Multimodal retrieval and rule-based inference over annotated
//! condition-monitoring data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gateway;
pub mod harness;
pub mod inference;
pub mod io;
pub mod model;
pub mod retrieval;
pub mod signal;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
