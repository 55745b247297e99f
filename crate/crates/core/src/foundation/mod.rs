//! Tensors, reverse-mode differentiation, deterministic random streams and
//! the finite-difference gradient check.

mod gradcheck;
mod graph;
mod params;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamSet;
pub use real::{DType, Real};
pub use rng::{RngState, RngStream};
pub use tensor::Tensor;

