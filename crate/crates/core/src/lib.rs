//! Few-shot classification with dynamic memory routing.
//!
//! The pipeline encodes support and query items, adapts each support vector
//! against a memory of base-class weights ([`routing::dmm_adapt`]), induces a
//! per-query class vector from the adapted supports ([`routing::qim_induce`]),
//! and scores queries with a scaled cosine classifier. Training runs in two
//! stages: supervised pre-training on base classes, then episodic meta-training.

pub mod classifier;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod rng;
pub mod routing;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
