//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod gemm;
mod graph;
mod params;
mod tensor;

pub use graph::{huber, sigmoid, softplus, Graph, Var};
pub use params::{ParamEntry, ParamLayout, ParamRole, ParamVector};
pub use tensor::Tensor;
