//! Tensors, a reverse-mode tape, layer primitives and the Adam optimiser.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use gradcheck::{check_gradients, grad_error, GradCheck};
pub use graph::{Graph, Var};
pub use layers::{
    dense, dropout, gru_sequence, layer_norm, softmax_t, uniform_tensor, DenseIds, GruIds, NormIds, LAYER_NORM_EPS,
};
pub(crate) use layers::require;
pub use params::{accumulate_grads, Bound, ParamId, ParamStore};
pub use real::{gemm, MatView, Real};
pub use tensor::Tensor;
