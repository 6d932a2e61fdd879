//! Dense-tensor engine: forward primitives, a recorded-tape reverse-mode
//! differentiator, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{
    grad_check, grad_check_against, grad_check_with, rel_err, GradCheckOptions, GradCheckReport,
    LeafCheck,
};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
