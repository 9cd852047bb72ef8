//! Dense tensors, a reverse-mode gradient tape, and Adam.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{compare_gradients, finite_diff_check, forward, forward_backward, LossGraph};
pub use graph::{log_sigmoid, log_sigmoid_f64, sigmoid, Gradients, Graph, ParamVars, Var};
pub(crate) use graph::{gelu, layer_norm_stats, log_softmax_in_place, softmax_in_place};
pub use params::ParamSet;
pub use tensor::Tensor;
pub(crate) use tensor::dot;
