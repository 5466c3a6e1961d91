//! Entropy-regularized multi-turn preference optimization on tabular tool-use MDPs.

pub mod cli;
pub mod data;
pub mod env;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod math;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod selector;
pub mod train;
pub mod tts;
pub mod verifier;

pub use error::{Error, Result};
