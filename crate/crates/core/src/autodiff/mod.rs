//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] borrows the store,
//! records a forward computation and returns [`Gradients`] from
//! [`Tape::backward`]. Gradients are folded back into the store with
//! [`ParamStore::accumulate`], which is where `Tensor::grad` gets populated.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::argmax;
pub use params::{group_of, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
