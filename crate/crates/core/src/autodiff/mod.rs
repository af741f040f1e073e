//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
pub mod gradcheck;
pub mod nn;
mod params;
mod tensor;

pub use graph::{Component, Graph, Var, LAYER_NORM_EPS};
pub use params::{AdamConfig, Bound, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
