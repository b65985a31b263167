//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! replays them in exact reverse order, accumulating gradients into every
//! leaf marked as requiring them. The scalar type is generic over
//! [`Scalar`]; the rest of the crate instantiates `f64` via the aliases at
//! the crate root.
//!
//! Design constraints kept deliberately strict:
//! * no broadcasting beyond scalar-tensor (one explicit row-broadcast op),
//! * every operation validates shapes and surfaces NaN/Inf as errors,
//! * a tape is consumed by its backward pass; reuse is a contract error.

mod checkpoint;
mod fd;
mod gru;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use fd::central_difference_grad;
pub use gru::{gru_cell, GruNodes, GruParams};
pub use scalar::Scalar;
pub use tape::{Gradients, Node, OpKind, Tape};
pub use tensor::Tensor;
