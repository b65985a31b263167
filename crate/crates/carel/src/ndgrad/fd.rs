//! Central-difference gradients, the independent oracle that every analytic
//! backward rule is checked against.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Numerically differentiate `f` at `at`, one coordinate at a time:
/// `(f(x + εe_i) − f(x − εe_i)) / 2ε`.
///
/// `f` must be a pure function of its argument; it is called `2·numel` times.
pub fn central_difference_grad<F: Scalar>(
    f: &mut dyn FnMut(&Tensor<F>) -> Result<F>,
    at: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    if eps <= F::zero() || !eps.is_finite() {
        return Err(Error::parameter(format!("step size must be > 0, got {eps}")));
    }
    let mut grad = Vec::with_capacity(at.numel());
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let g = (up - down) / (eps + eps);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {i} is not finite"
            )));
        }
        grad.push(g);
    }
    Tensor::new(at.shape().to_vec(), grad)
}
