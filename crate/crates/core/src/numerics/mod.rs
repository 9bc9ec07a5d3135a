//! Dense `f64` tensors, reverse-mode differentiation, attention primitives,
//! the finite-difference gradient oracle and checkpoint I/O.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;

pub use attention::{check_heads, multi_head, softmax, CrossAttention};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{log_sigmoid, log_sum_exp, sigmoid, softmax_row_masked, Gradients, Graph, NodeId, RopeSpec, Unary};
pub use nn::{FeedForward, Linear, RmsNorm};
pub use optim::AdamW;
pub use param::{Module, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
