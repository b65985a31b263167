//! Instruction-following reinforcement-learning laboratory.
//!
//! The crate bundles everything needed to train and probe language-conditioned
//! agents on a small symbolic gridworld without external ML frameworks:
//!
//! * [`ndgrad`] — dense tensors plus a recording tape for reverse-mode
//!   gradients, generic over the scalar type.
//! * [`gridworld`] — a deterministic, seedable POMDP with procedurally
//!   generated missions and templated instructions.
//! * [`encoders`] — vocabulary, instruction/observation encoders, and the
//!   actor-critic heads.
//! * [`xclip`] — multi-grained episode/instruction similarities, their
//!   attention-based aggregation, and the symmetric contrastive loss.
//! * [`tracker`] — subtask splitting, per-step score tracking, spike
//!   detection, and instruction masking.
//! * [`trainer`] — PPO with generalized advantage estimation and the
//!   outer-loop auxiliary update over successful episodes.
//! * [`harness`] — configuration, metrics, evaluation, and the verification
//!   commands exposed by the `carel` binary.

pub mod encoders;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod ndgrad;
pub mod tracker;
pub mod trainer;
pub mod xclip;

/// Scalar type used by the training stack. The numerics core is generic;
/// everything above it runs in 64-bit floating point.
pub type Real = f64;

/// Dense tensor over [`Real`].
pub type Tensor = ndgrad::Tensor<Real>;

/// Recording tape over [`Real`].
pub type Tape = ndgrad::Tape<Real>;

/// Gradients produced by a backward pass over [`Real`].
pub type Gradients = ndgrad::Gradients<Real>;

pub use error::{Error, Result};
pub use ndgrad::Node;
