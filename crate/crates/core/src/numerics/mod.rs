//! Dense `f64` tensors with a reverse-mode differentiation tape.

mod gradcheck;
mod graph;
pub mod io;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckOptions, GradCheckReport, ParamError};
pub use graph::{softmax_last, Graph, L1Reduction, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
