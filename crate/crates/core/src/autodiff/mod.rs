//! Minimal reverse-mode automatic differentiation for the network modules.

pub mod check;
mod graph;
mod matrix;
pub mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{Linear, Mlp, ParamStore};

pub(crate) use graph::sigmoid;

#[cfg(test)]
mod tests;
