//! Build open-shot text classification benchmarks, turn them into
//! entailment-style triplets, score them with a yes/no model and report
//! per-group accuracy.

pub mod benchmark;
pub mod error;
pub mod eval;
pub mod indirect;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod scoring;
pub mod seed;
pub mod triplets;

pub use error::{Error, Result};
