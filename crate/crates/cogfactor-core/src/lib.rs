//! Multi-dataset decoding of high-dimensional statistical maps.
//!
//! The crate implements a three-layer linear classification architecture:
//!
//! 1. a fixed orthogonal projection onto one or more sparse spatial
//!    dictionaries, concatenated across scales ([`projection`]);
//! 2. a learned embedding into a latent space shared by all datasets,
//!    regularized with inverted dropout ([`model`]);
//! 3. per-dataset multinomial heads read out of that latent space.
//!
//! Training cycles through datasets with mini-batch Adam ([`optim`]),
//! updating the shared embedding together with the scheduled dataset's
//! head only. [`introspect`] collapses a trained model back into
//! per-condition maps and summarizes the latent space with k-means
//! templates. [`data`] holds dataset containers, subject-level splitting
//! and a synthetic multi-study generator.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, the
//! experiment harness and the CLI live in the companion `cogfactor`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod introspect;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod projection;

pub use error::{Error, Result};
