//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.

mod graph;
mod optim;
mod tensor;

pub use graph::{AttnLayout, Gradients, Graph, Group, ParamKey, Var};
pub use optim::{clip_grad_norm, grad_norm, warmup_scale, AdamW};
pub use tensor::{matmul, Tensor};
