//! Dense `f64` tensors, the handful of kernels the pipeline needs, and a
//! reverse-mode differentiation tape over exactly those kernels.

mod graph;
pub mod nn;
pub mod ops;
mod param;
mod tensor;

pub use graph::{Graph, Var};
pub use ops::{conv2d, masked_softmax, matmul, max_pool_peaks, sigmoid, softmax};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

pub(crate) use graph::window;
