//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{log_sum_exp, softmax, Tensor};

pub(crate) use tensor::sq_dist;
