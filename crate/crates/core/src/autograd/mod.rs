//! Dense tensors, a define-by-run reverse-mode tape, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{AdamState, OptimConfig};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{sigmoid, softplus, Graph, Var};
pub use tensor::Tensor;
