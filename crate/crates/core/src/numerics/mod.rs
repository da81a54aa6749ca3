//! Dense `f64` tensors, reverse-mode differentiation, and the numerically
//! stable scalar kernels everything else is built on.

pub mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{cosine_similarity, log_sigmoid, masked_softmax, AttentionLayout};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
