//! Tensors, differentiation, and optimization.

mod adam;
pub mod ops;
mod param;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use ops::{
    binary_cross_entropy, cross_entropy, kl_divergence, layer_norm, matmul, sigmoid, softmax,
};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{KvSource, Tape, Var};
pub use tensor::Tensor;

/// Fills every gradient in `params` from a recorded forward pass.
pub fn compute_gradients(tape: &Tape, loss: Var, params: &mut ParamStore) -> crate::Result<()> {
    tape.backward(loss, params)
}
