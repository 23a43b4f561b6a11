//! Sequential-transformer recommender laboratory.
//!
//! The crate bundles a group-Gaussian user simulator, a small reverse-mode
//! autodiff engine, the transformer recommender with its rating
//! inner-product bottleneck, baseline policies (including a tree search
//! over the Bayesian group posterior), an evaluation harness and a probe
//! that reads the group posterior back out of the model's activations.

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod policies;
pub mod probe;

pub use error::{Error, Result};
pub mod rng;
pub mod simenv;
