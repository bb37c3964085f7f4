//! Attention-sink analysis and structured pruning for decoder-only transformers.
//!
//! The crate bundles a small grouped-query transformer with attention
//! instrumentation, redundancy metrics computed from the captured maps,
//! pruning strategies that act on those metrics, and an evaluation harness.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
