//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod graph;
mod kernels;
mod params;
mod token;

pub use graph::{Graph, Var};
pub use params::{Binder, ParamEntry, ParamGroup, ParamId, ParamRegistry};
pub use token::TokenTensor;
