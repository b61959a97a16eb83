//! Dense tensors, reverse-mode differentiation, MLPs and the Adam optimizer.

mod gradcheck;
mod graph;
mod mlp;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_scalar, max_relative_error};
pub use graph::{softmax, Graph, NodeId};
pub use mlp::{mlp_forward, Activation, Mlp, MlpSpec};
pub use optim::{adam_step, OptimState};
pub use params::ParamSet;
pub use tensor::Tensor;
