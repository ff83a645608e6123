//! Learned query cost estimation over logical plans.
//!
//! The pipeline: logical plans are ingested (or synthesized), recast into
//! Operator-Table-Predicate binary trees, encoded with one-hot operator and
//! table vocabularies plus a learned predicate embedding, decomposed into
//! vote-masked sub-trees, and regressed with a tree convolution network that
//! predicts a query's total CPU minutes.

pub mod artifact;
pub mod embed;
pub mod error;
pub mod eval;
pub mod nn;
pub mod otp;
pub mod pipeline;
pub mod plan;
pub mod sampler;
pub mod util;

pub use error::{Error, Result};
