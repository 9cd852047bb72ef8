pub mod error;
pub mod eval;
pub mod jsonl;
pub mod nn;
pub mod policy;
pub mod prefs;
pub mod reward;
pub mod seed;
pub mod stats;
pub mod taskgen;
pub mod trainers;

pub use error::{Error, Result};
