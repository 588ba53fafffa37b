//! Minimal numeric kernels, a reverse-mode gradient tape and Adam.
//!
//! Kernels are pure functions of their inputs and safe to call concurrently
//! on disjoint data; a [`GradTape`] is single-owner and single-threaded.

mod adam;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::grad_check;
pub use kernels::{conv1d_causal, softmax_cross_entropy};
pub(crate) use kernels::{conv1d_causal_raw, cross_entropy_masked, sigmoid, softmax_row};
pub use tape::{GradTape, Gradients, NodeId, ParamId, Src};
pub use tensor::Tensor;
