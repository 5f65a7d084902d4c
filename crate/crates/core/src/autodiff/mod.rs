//! Minimal dense reverse-mode differentiation in double precision.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
mod params;
pub mod suite;

pub use checkpoint::Checkpoint;
pub use conv::Conv1dSpec;
pub use gradcheck::{finite_diff_check, param_diff_check, relative_error};
pub use graph::{sigmoid, Graph, Tensor, GLN_EPS};
pub use params::{Adam, ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;
