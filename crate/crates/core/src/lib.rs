//! Data-free class-incremental learning: synthesize class impressions from a
//! frozen classifier, then train on new classes plus the synthesized replay.

pub mod archive;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
