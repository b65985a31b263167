//! Value-level kernels shared by the tape's forward pass and by callers that
//! need plain (non-differentiated) arithmetic, such as the instruction
//! tracker. Keeping one implementation per primitive guarantees bit-identical
//! results between recorded and unrecorded evaluation.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

pub fn dot_slices<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn check_finite<F: Scalar>(t: Tensor<F>, op: &str) -> Result<Tensor<F>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(format!("{op} produced NaN or Inf")))
    }
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "add: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "add")
}

pub fn sub<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "sub: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "sub")
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "mul: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "mul")
}

pub fn scale<F: Scalar>(a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
    let data = a.data().iter().map(|x| *x * c).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "scale")
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::dimension(format!(
            "matmul: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![F::zero(); p * r];
    for i in 0..p {
        let arow = a.row(i);
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate().take(q) {
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    check_finite(Tensor::new(vec![p, r], out)?, "matmul")
}

/// `a · bᵀ` without materializing the transpose; both operands row-major.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::dimension(format!(
            "matmul_nt: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (p, r) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(p * r);
    for i in 0..p {
        let arow = a.row(i);
        for j in 0..r {
            out.push(dot_slices(arow, b.row(j)));
        }
    }
    check_finite(Tensor::new(vec![p, r], out)?, "matmul_nt")
}

pub fn transpose<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    if !a.is_matrix() {
        return Err(Error::dimension(format!(
            "transpose: expected matrix, got {:?}",
            a.shape()
        )));
    }
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn matvec<F: Scalar>(a: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if !a.is_matrix() || !x.is_vector() || a.cols() != x.numel() {
        return Err(Error::dimension(format!(
            "matvec: shape {:?} vs {:?}",
            a.shape(),
            x.shape()
        )));
    }
    let out = (0..a.rows()).map(|i| dot_slices(a.row(i), x.data())).collect();
    check_finite(Tensor::vector(out), "matvec")
}

pub fn dot<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if !a.is_vector() || a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "dot: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    check_finite(Tensor::scalar(dot_slices(a.data(), b.data())), "dot")
}

pub fn tanh<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let data = a.data().iter().map(|x| x.tanh()).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "tanh")
}

pub fn sigmoid<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let one = F::one();
    let data = a.data().iter().map(|x| one / (one + (-*x).exp())).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "sigmoid")
}

pub fn exp<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let data = a.data().iter().map(|x| x.exp()).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "exp")
}

pub fn log<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let data = a.data().iter().map(|x| x.ln()).collect();
    check_finite(Tensor::new(a.shape().to_vec(), data)?, "log")
}

/// Max-subtracted softmax with temperature over a slice.
pub fn softmax_slice<F: Scalar>(v: &[F], tau: F) -> Vec<F> {
    let max = v.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = v.iter().map(|x| ((*x - max) / tau).exp()).collect();
    let sum: F = out.iter().cloned().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub fn softmax_temp<F: Scalar>(v: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
    if !v.is_vector() {
        return Err(Error::dimension(format!(
            "softmax_temp: expected vector, got {:?}",
            v.shape()
        )));
    }
    if tau <= F::zero() || !tau.is_finite() {
        return Err(Error::parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    check_finite(Tensor::vector(softmax_slice(v.data(), tau)), "softmax_temp")
}

/// Numerically stable `log softmax(v/τ)`.
pub fn log_softmax_temp<F: Scalar>(v: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
    if !v.is_vector() {
        return Err(Error::dimension(format!(
            "log_softmax_temp: expected vector, got {:?}",
            v.shape()
        )));
    }
    if tau <= F::zero() || !tau.is_finite() {
        return Err(Error::parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    let scaled: Vec<F> = v.data().iter().map(|x| *x / tau).collect();
    let max = scaled.iter().cloned().fold(F::neg_infinity(), F::max);
    let lse = max + scaled.iter().map(|x| (*x - max).exp()).sum::<F>().ln();
    let out = scaled.iter().map(|x| *x - lse).collect();
    check_finite(Tensor::vector(out), "log_softmax_temp")
}

/// Softmax-weighted self-aggregation of a slice: `softmax(v/τ)ᵀ · v`.
pub fn aosm_slice<F: Scalar>(v: &[F], tau: F) -> F {
    let w = softmax_slice(v, tau);
    dot_slices(&w, v)
}

pub fn l2_normalize<F: Scalar>(v: &Tensor<F>) -> Result<Tensor<F>> {
    if !v.is_vector() {
        return Err(Error::dimension(format!(
            "l2_normalize: expected vector, got {:?}",
            v.shape()
        )));
    }
    let n = v.l2_norm();
    if n == F::zero() {
        return Err(Error::NonFinite("l2_normalize of zero vector".into()));
    }
    scale(v, F::one() / n)
}

/// Mean over the given axis of a matrix (0 → column means, 1 → row means).
pub fn mean_axis<F: Scalar>(a: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if !a.is_matrix() || axis > 1 {
        return Err(Error::dimension(format!(
            "mean_axis: matrix required, got {:?} axis {axis}",
            a.shape()
        )));
    }
    let (n, m) = (a.rows(), a.cols());
    let t = match axis {
        0 => {
            let inv = F::from_usize(n).unwrap().recip();
            let mut out = vec![F::zero(); m];
            for i in 0..n {
                for (o, v) in out.iter_mut().zip(a.row(i)) {
                    *o += *v;
                }
            }
            for o in &mut out {
                *o *= inv;
            }
            Tensor::vector(out)
        }
        _ => {
            let inv = F::from_usize(m).unwrap().recip();
            Tensor::vector((0..n).map(|i| a.row(i).iter().cloned().sum::<F>() * inv).collect())
        }
    };
    check_finite(t, "mean_axis")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::eye(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn matmul_row_sums() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let out = matmul(&a, &ones).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_nt_matches_transpose_route() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let direct = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&via_t).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_constant_input_is_uniform() {
        let v = Tensor::vector(vec![0.7f64; 3]);
        for tau in [0.1, 1.0, 42.0] {
            let s = softmax_temp(&v, tau).unwrap();
            for p in s.data() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_direct_case() {
        let v = Tensor::vector(vec![0.0, (3.0f64).ln()]);
        let s = softmax_temp(&v, 1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_limit() {
        let v = Tensor::vector(vec![0.0f64, 1.0, 2.0]);
        let s = softmax_temp(&v, 1e6).unwrap();
        for p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let v = Tensor::vector(vec![1.0f64]);
        assert!(matches!(softmax_temp(&v, 0.0), Err(crate::Error::Parameter(_))));
        let empty = Tensor::<f64>::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(softmax_temp(&empty, 1.0), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn log_of_negative_is_surfaced() {
        let v = Tensor::vector(vec![-1.0f64]);
        assert!(matches!(log(&v), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn f32_softmax_still_sums_to_one() {
        let v = Tensor::<f32>::vector(vec![0.3, -2.0, 1.5]);
        let s = softmax_temp(&v, 0.7).unwrap();
        let sum: f32 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
