use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type for tensors and tapes: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion used by the checkpoint format, which
    /// stores raw 64-bit values regardless of the in-memory scalar.
    fn to_f64_exact(self) -> f64;
    fn from_f64_exact(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
    fn from_f64_exact(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64_exact(self) -> f64 {
        self
    }
    fn from_f64_exact(v: f64) -> Self {
        v
    }
}
