//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! Only the primitives the network, the losses and the sampler need are
//! provided. Every differentiable op is covered by the central-difference
//! checker in [`gradcheck`].

pub mod gradcheck;
mod kernels;
pub mod linalg;
mod tape;
mod tensor;

pub use linalg::{rank, solve_spd, svd_small, Matrix, Svd};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
