//! Tape-based reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;

pub use graph::{Graph, Mode, Var};
pub use optim::{Optimizer, OptimizerConfig};
