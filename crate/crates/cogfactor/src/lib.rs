//! IO, experiment harness and CLI for the multi-study decoding stack.
//!
//! The numerical core lives in `cogfactor-core`; this crate adds the NDT
//! tensor container, dataset/dictionary/checkpoint layouts, the ablation
//! and learning-curve harness, and the `cogfactor` command-line tool.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod ndt;
pub mod report;

pub use error::{Error, Result};
