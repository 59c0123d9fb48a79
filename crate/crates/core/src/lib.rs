//! Noise-aware label refinement and post-training for query-driven key-value
//! document parsing, at desk scale.

pub mod distill;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod rng;
pub mod sft;
pub mod tlr;
pub mod synthdoc;
pub mod vocab;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
