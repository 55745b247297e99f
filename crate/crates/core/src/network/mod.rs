//! DeepFlow-{k}T: k transformer branches with AdaLN-Zero conditioning,
//! per-branch velocity heads and a velocity refiner with acceleration (VeRA)
//! between consecutive branches.

mod config;
pub mod layers;
mod model;

pub use config::{DataGeometry, ModelConfig, VeraVariant};
pub use model::{branch_major, BranchOutputs, DeepFlowModel, VeraBlock};
