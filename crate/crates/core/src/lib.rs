//! Deeply supervised flow matching: DeepFlow-{k}T transformers with velocity
//! refinement, trained and evaluated on small synthetic distributions.

pub mod ablation;
pub mod cli;
pub mod datasets;
mod error;
pub mod evaluation;
pub mod foundation;
pub mod interpolant;
pub mod io;
pub mod network;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
