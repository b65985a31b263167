//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Operations are recorded eagerly: each method on [`Tape`] computes the
//! forward value immediately (through the shared kernels, so shapes and
//! finiteness are validated at record time) and appends one node. A node's
//! inputs always precede it, so a single reverse sweep in
//! [`Tape::backward`] visits every consumer before its producers.
//!
//! A tape is consumed by its backward pass: recording onto it afterwards, or
//! running backward twice, is reported as a contract violation rather than
//! silently producing stale gradients.

use crate::error::{Error, Result};

use super::kernels;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(pub(crate) usize);

/// Discriminant of a tape operation, used by diagnostics and by the
/// gradient-corruption hook in the finite-difference harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    MatMul,
    MatMulNT,
    Transpose,
    MatVec,
    Dot,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    SoftmaxTemp,
    LogSoftmaxTemp,
    L2Normalize,
    L2NormalizeRows,
    Aosm,
    AosmRows,
    AosmCols,
    MeanAxis,
    SumAll,
    MeanAll,
    ConcatVec,
    StackRows,
    StackScalars,
    RowSlice,
    Elem,
    EmbedRows,
    AddRowBroadcast,
    Reshape,
    MinElem,
    ClampConst,
}

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Scale(Node, F),
    AddConst(Node, F),
    MatMul(Node, Node),
    MatMulNT(Node, Node),
    Transpose(Node),
    MatVec(Node, Node),
    Dot(Node, Node),
    Tanh(Node),
    Sigmoid(Node),
    Exp(Node),
    Log(Node),
    SoftmaxTemp(Node, F),
    LogSoftmaxTemp(Node, F),
    L2Normalize(Node),
    L2NormalizeRows(Node),
    Aosm(Node, F),
    AosmRows(Node, F),
    AosmCols(Node, F),
    MeanAxis(Node, usize),
    SumAll(Node),
    MeanAll(Node),
    ConcatVec(Vec<Node>),
    StackRows(Vec<Node>),
    StackScalars(Vec<Node>),
    RowSlice(Node, usize),
    Elem(Node, usize),
    EmbedRows(Node, Vec<usize>),
    AddRowBroadcast(Node, Node),
    Reshape(Node),
    MinElem(Node, Node),
    ClampConst(Node, F, F),
}

impl<F: Scalar> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(..) => OpKind::AddConst,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Transpose(..) => OpKind::Transpose,
            Op::MatVec(..) => OpKind::MatVec,
            Op::Dot(..) => OpKind::Dot,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::SoftmaxTemp(..) => OpKind::SoftmaxTemp,
            Op::LogSoftmaxTemp(..) => OpKind::LogSoftmaxTemp,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::L2NormalizeRows(..) => OpKind::L2NormalizeRows,
            Op::Aosm(..) => OpKind::Aosm,
            Op::AosmRows(..) => OpKind::AosmRows,
            Op::AosmCols(..) => OpKind::AosmCols,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::ConcatVec(..) => OpKind::ConcatVec,
            Op::StackRows(..) => OpKind::StackRows,
            Op::StackScalars(..) => OpKind::StackScalars,
            Op::RowSlice(..) => OpKind::RowSlice,
            Op::Elem(..) => OpKind::Elem,
            Op::EmbedRows(..) => OpKind::EmbedRows,
            Op::AddRowBroadcast(..) => OpKind::AddRowBroadcast,
            Op::Reshape(..) => OpKind::Reshape,
            Op::MinElem(..) => OpKind::MinElem,
            Op::ClampConst(..) => OpKind::ClampConst,
        }
    }
}

#[derive(Clone, Debug)]
struct Entry<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by the tape's nodes.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn grad(&self, node: Node) -> Option<&Tensor<F>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: Node) -> Option<Tensor<F>> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }

    /// Gradient of `node`, or an all-zero tensor of `shape` if the loss did
    /// not depend on it.
    pub fn grad_or_zero(&self, node: Node, shape: &[usize]) -> Tensor<F> {
        match self.grad(node) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Wengert-list recorder. See the module docs for the lifecycle.
#[derive(Debug, Default)]
pub struct Tape<F: Scalar> {
    nodes: Vec<Entry<F>>,
    consumed: bool,
    corrupt: Option<(OpKind, F)>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply every gradient propagated through ops of `kind` by `factor`.
    /// This deliberately breaks the backward pass; it exists so that the
    /// finite-difference checker can prove it would detect a wrong gradient.
    pub fn set_gradient_corruption(&mut self, kind: OpKind, factor: F) {
        self.corrupt = Some((kind, factor));
    }

    pub fn value(&self, node: Node) -> &Tensor<F> {
        &self.nodes[node.0].value
    }

    fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::contract(
                "tape was already consumed by backward; build a fresh tape",
            ))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Node {
        self.nodes.push(Entry {
            op,
            value,
            requires_grad,
        });
        Node(self.nodes.len() - 1)
    }

    fn requires(&self, n: Node) -> bool {
        self.nodes[n.0].requires_grad
    }

    fn requires_any(&self, ns: &[Node]) -> bool {
        ns.iter().any(|n| self.requires(*n))
    }

    /// Insert a value that gradients should not be collected for
    /// (observations, targets, detached statistics).
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Node> {
        self.ensure_live()?;
        if !value.all_finite() {
            return Err(Error::NonFinite("constant leaf is not finite".into()));
        }
        Ok(self.push(Op::Leaf, value, false))
    }

    /// Insert a trainable value; its gradient is available after backward.
    pub fn param(&mut self, value: Tensor<F>) -> Result<Node> {
        self.ensure_live()?;
        if !value.all_finite() {
            return Err(Error::NonFinite("parameter leaf is not finite".into()));
        }
        Ok(self.push(Op::Leaf, value, true))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::add(self.value(a), self.value(b))?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: Node, c: F) -> Result<Node> {
        self.ensure_live()?;
        if !c.is_finite() {
            return Err(Error::parameter(format!("scale factor must be finite, got {c}")));
        }
        let v = kernels::scale(self.value(a), c)?;
        let rg = self.requires(a);
        Ok(self.push(Op::Scale(a, c), v, rg))
    }

    pub fn add_const(&mut self, a: Node, c: F) -> Result<Node> {
        self.ensure_live()?;
        if !c.is_finite() {
            return Err(Error::parameter(format!("added constant must be finite, got {c}")));
        }
        let data = self.value(a).data().iter().map(|x| *x + c).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(Op::AddConst(a, c), v, rg))
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// `a · bᵀ` for row-major operands with matching column counts.
    pub fn matmul_nt(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::MatMulNT(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::transpose(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Transpose(a), v, rg))
    }

    pub fn matvec(&mut self, a: Node, x: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::matvec(self.value(a), self.value(x))?;
        let rg = self.requires_any(&[a, x]);
        Ok(self.push(Op::MatVec(a, x), v, rg))
    }

    pub fn dot(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::dot(self.value(a), self.value(b))?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::Dot(a, b), v, rg))
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::tanh(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Tanh(a), v, rg))
    }

    pub fn sigmoid(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::sigmoid(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Sigmoid(a), v, rg))
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::exp(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Exp(a), v, rg))
    }

    pub fn log(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::log(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Log(a), v, rg))
    }

    pub fn softmax_temp(&mut self, a: Node, tau: F) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::softmax_temp(self.value(a), tau)?;
        let rg = self.requires(a);
        Ok(self.push(Op::SoftmaxTemp(a, tau), v, rg))
    }

    pub fn log_softmax_temp(&mut self, a: Node, tau: F) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::log_softmax_temp(self.value(a), tau)?;
        let rg = self.requires(a);
        Ok(self.push(Op::LogSoftmaxTemp(a, tau), v, rg))
    }

    pub fn l2_normalize(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::l2_normalize(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(Op::L2Normalize(a), v, rg))
    }

    /// Normalize each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::dimension(format!(
                "l2_normalize_rows: expected matrix, got {:?}",
                va.shape()
            )));
        }
        let (n, m) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = va.row(i);
            let norm = kernels::dot_slices(row, row).sqrt();
            if norm == F::zero() {
                return Err(Error::NonFinite(format!("l2_normalize_rows: row {i} is zero")));
            }
            out.extend(row.iter().map(|x| *x / norm));
        }
        let v = Tensor::new(vec![n, m], out)?;
        if !v.all_finite() {
            return Err(Error::NonFinite("l2_normalize_rows produced NaN or Inf".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Op::L2NormalizeRows(a), v, rg))
    }

    /// Softmax-weighted self-aggregation of a vector:
    /// `softmax(v/τ)ᵀ · v`, a smooth interpolation between mean and max.
    pub fn aosm(&mut self, a: Node, tau: F) -> Result<Node> {
        self.ensure_live()?;
        Self::check_tau(tau)?;
        let va = self.value(a);
        if !va.is_vector() {
            return Err(Error::dimension(format!(
                "aosm: expected vector, got {:?}",
                va.shape()
            )));
        }
        let v = Tensor::scalar(kernels::aosm_slice(va.data(), tau));
        if !v.all_finite() {
            return Err(Error::NonFinite("aosm produced NaN or Inf".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Aosm(a, tau), v, rg))
    }

    /// Per-row [`Tape::aosm`] over a matrix; returns one scalar per row.
    pub fn aosm_rows(&mut self, a: Node, tau: F) -> Result<Node> {
        self.ensure_live()?;
        Self::check_tau(tau)?;
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::dimension(format!(
                "aosm_rows: expected matrix, got {:?}",
                va.shape()
            )));
        }
        let out = (0..va.rows())
            .map(|i| kernels::aosm_slice(va.row(i), tau))
            .collect();
        let v = Tensor::vector(out);
        if !v.all_finite() {
            return Err(Error::NonFinite("aosm_rows produced NaN or Inf".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Op::AosmRows(a, tau), v, rg))
    }

    /// Per-column [`Tape::aosm`] over a matrix; returns one scalar per column.
    pub fn aosm_cols(&mut self, a: Node, tau: F) -> Result<Node> {
        self.ensure_live()?;
        Self::check_tau(tau)?;
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::dimension(format!(
                "aosm_cols: expected matrix, got {:?}",
                va.shape()
            )));
        }
        let (n, m) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(m);
        let mut col = vec![F::zero(); n];
        for j in 0..m {
            for i in 0..n {
                col[i] = va.data()[i * m + j];
            }
            out.push(kernels::aosm_slice(&col, tau));
        }
        let v = Tensor::vector(out);
        if !v.all_finite() {
            return Err(Error::NonFinite("aosm_cols produced NaN or Inf".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Op::AosmCols(a, tau), v, rg))
    }

    fn check_tau(tau: F) -> Result<()> {
        if tau <= F::zero() || !tau.is_finite() {
            Err(Error::parameter(format!("temperature must be > 0, got {tau}")))
        } else {
            Ok(())
        }
    }

    /// Mean over axis 0 (column means) or axis 1 (row means) of a matrix.
    pub fn mean_axis(&mut self, a: Node, axis: usize) -> Result<Node> {
        self.ensure_live()?;
        let v = kernels::mean_axis(self.value(a), axis)?;
        let rg = self.requires(a);
        Ok(self.push(Op::MeanAxis(a, axis), v, rg))
    }

    pub fn sum_all(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let s: F = self.value(a).data().iter().cloned().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite("sum_all produced NaN or Inf".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s), rg))
    }

    pub fn mean_all(&mut self, a: Node) -> Result<Node> {
        self.ensure_live()?;
        let n = self.value(a).numel();
        let s: F = self.value(a).data().iter().cloned().sum::<F>()
            / F::from_usize(n).unwrap();
        if !s.is_finite() {
            return Err(Error::NonFinite("mean_all produced NaN or Inf".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s), rg))
    }

    /// Concatenate vectors and scalars (in order) into one vector.
    pub fn concat_vec(&mut self, parts: &[Node]) -> Result<Node> {
        self.ensure_live()?;
        if parts.is_empty() {
            return Err(Error::dimension("concat_vec: no parts given"));
        }
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if !(v.is_vector() || v.is_scalar()) {
                return Err(Error::dimension(format!(
                    "concat_vec: parts must be vectors or scalars, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let v = Tensor::vector(data);
        let rg = self.requires_any(parts);
        Ok(self.push(Op::ConcatVec(parts.to_vec()), v, rg))
    }

    /// Stack equal-length vectors as the rows of a new matrix.
    pub fn stack_rows(&mut self, parts: &[Node]) -> Result<Node> {
        self.ensure_live()?;
        if parts.is_empty() {
            return Err(Error::dimension("stack_rows: no parts given"));
        }
        let m = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * m);
        for p in parts {
            let v = self.value(*p);
            if !v.is_vector() || v.numel() != m {
                return Err(Error::dimension(format!(
                    "stack_rows: expected vectors of length {m}, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(vec![parts.len(), m], data)?;
        let rg = self.requires_any(parts);
        Ok(self.push(Op::StackRows(parts.to_vec()), v, rg))
    }

    /// Stack scalars into a vector.
    pub fn stack_scalars(&mut self, parts: &[Node]) -> Result<Node> {
        self.ensure_live()?;
        if parts.is_empty() {
            return Err(Error::dimension("stack_scalars: no parts given"));
        }
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if !v.is_scalar() {
                return Err(Error::dimension(format!(
                    "stack_scalars: expected scalars, got {:?}",
                    v.shape()
                )));
            }
            data.push(v.data()[0]);
        }
        let v = Tensor::vector(data);
        let rg = self.requires_any(parts);
        Ok(self.push(Op::StackScalars(parts.to_vec()), v, rg))
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn row_slice(&mut self, a: Node, i: usize) -> Result<Node> {
        self.ensure_live()?;
        let va = self.value(a);
        if !va.is_matrix() || i >= va.rows() {
            return Err(Error::dimension(format!(
                "row_slice: row {i} of {:?}",
                va.shape()
            )));
        }
        let v = Tensor::vector(va.row(i).to_vec());
        let rg = self.requires(a);
        Ok(self.push(Op::RowSlice(a, i), v, rg))
    }

    /// Extract one element (row-major flat index) as a scalar.
    pub fn elem(&mut self, a: Node, flat: usize) -> Result<Node> {
        self.ensure_live()?;
        let va = self.value(a);
        if flat >= va.numel() {
            return Err(Error::dimension(format!(
                "elem: index {flat} out of {} elements",
                va.numel()
            )));
        }
        let v = Tensor::scalar(va.data()[flat]);
        let rg = self.requires(a);
        Ok(self.push(Op::Elem(a, flat), v, rg))
    }

    /// Gather rows of an embedding table; duplicate ids are allowed and their
    /// gradients accumulate.
    pub fn embed_rows(&mut self, table: Node, ids: &[usize]) -> Result<Node> {
        self.ensure_live()?;
        let vt = self.value(table);
        if !vt.is_matrix() {
            return Err(Error::dimension(format!(
                "embed_rows: table must be a matrix, got {:?}",
                vt.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::dimension("embed_rows: no ids given"));
        }
        let (n, m) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= n {
                return Err(Error::dimension(format!(
                    "embed_rows: id {id} out of {n} rows"
                )));
            }
            data.extend_from_slice(vt.row(id));
        }
        let v = Tensor::new(vec![ids.len(), m], data)?;
        let rg = self.requires(table);
        Ok(self.push(Op::EmbedRows(table, ids.to_vec()), v, rg))
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_row_broadcast(&mut self, a: Node, r: Node) -> Result<Node> {
        self.ensure_live()?;
        let (va, vr) = (self.value(a), self.value(r));
        if !va.is_matrix() || !vr.is_vector() || va.cols() != vr.numel() {
            return Err(Error::dimension(format!(
                "add_row_broadcast: shape {:?} vs {:?}",
                va.shape(),
                vr.shape()
            )));
        }
        let (n, m) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for (x, y) in va.row(i).iter().zip(vr.data()) {
                data.push(*x + *y);
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        if !v.all_finite() {
            return Err(Error::NonFinite("add_row_broadcast produced NaN or Inf".into()));
        }
        let rg = self.requires_any(&[a, r]);
        Ok(self.push(Op::AddRowBroadcast(a, r), v, rg))
    }

    pub fn reshape(&mut self, a: Node, shape: Vec<usize>) -> Result<Node> {
        self.ensure_live()?;
        let v = self.value(a).reshaped(shape)?;
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    /// Elementwise minimum; on ties the gradient routes to the first operand.
    pub fn min_elem(&mut self, a: Node, b: Node) -> Result<Node> {
        self.ensure_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(format!(
                "min_elem: shape {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| if *x <= *y { *x } else { *y })
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::MinElem(a, b), v, rg))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through on the closed
    /// interval and zero outside it.
    pub fn clamp_const(&mut self, a: Node, lo: F, hi: F) -> Result<Node> {
        self.ensure_live()?;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::parameter(format!(
                "clamp_const: invalid interval [{lo}, {hi}]"
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| if *x < lo { lo } else if *x > hi { hi } else { *x })
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(Op::ClampConst(a, lo, hi), v, rg))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients of
    /// leaves the loss never touched are absent (see
    /// [`Gradients::grad_or_zero`]).
    pub fn backward(&mut self, loss: Node) -> Result<Gradients<F>> {
        self.ensure_live()?;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::dimension(format!(
                "backward: loss must be a scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..nodes.len()).rev() {
            let Some(d) = grads[i].take() else { continue };
            let entry = &nodes[i];
            if !entry.requires_grad || matches!(entry.op, Op::Leaf) {
                grads[i] = Some(d);
                continue;
            }

            // Optional deliberate corruption of the propagated gradient
            // (testing hook; see `set_gradient_corruption`).
            let scaled;
            let dp: &Tensor<F> = match &self.corrupt {
                Some((kind, factor)) if *kind == entry.op.kind() => {
                    scaled = kernels::scale(&d, *factor)?;
                    &scaled
                }
                _ => &d,
            };

            let shape_of = |n: Node| nodes[n.0].value.shape().to_vec();
            macro_rules! acc {
                ($n:expr) => {{
                    let shape = shape_of($n);
                    let slot = &mut grads[$n.0];
                    if slot.is_none() {
                        *slot = Some(Tensor::zeros(shape));
                    }
                    slot.as_mut().unwrap().data_mut()
                }};
            }

            match &entry.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    axpy(acc!(*a), dp.data(), F::one());
                    axpy(acc!(*b), dp.data(), F::one());
                }
                Op::Sub(a, b) => {
                    axpy(acc!(*a), dp.data(), F::one());
                    axpy(acc!(*b), dp.data(), -F::one());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    mul_axpy(acc!(*a), dp.data(), vb.data());
                    mul_axpy(acc!(*b), dp.data(), va.data());
                }
                Op::Scale(a, c) => axpy(acc!(*a), dp.data(), *c),
                Op::AddConst(a, _) => axpy(acc!(*a), dp.data(), F::one()),
                Op::MatMul(a, b) => {
                    let ga = kernels::matmul_nt(dp, &nodes[b.0].value)?;
                    axpy(acc!(*a), ga.data(), F::one());
                    let at = kernels::transpose(&nodes[a.0].value)?;
                    let gb = kernels::matmul(&at, dp)?;
                    axpy(acc!(*b), gb.data(), F::one());
                }
                Op::MatMulNT(a, b) => {
                    let ga = kernels::matmul(dp, &nodes[b.0].value)?;
                    axpy(acc!(*a), ga.data(), F::one());
                    let dt = kernels::transpose(dp)?;
                    let gb = kernels::matmul(&dt, &nodes[a.0].value)?;
                    axpy(acc!(*b), gb.data(), F::one());
                }
                Op::Transpose(a) => {
                    let ga = kernels::transpose(dp)?;
                    axpy(acc!(*a), ga.data(), F::one());
                }
                Op::MatVec(a, x) => {
                    let (va, vx) = (&nodes[a.0].value, &nodes[x.0].value);
                    let (n, m) = (va.rows(), va.cols());
                    {
                        let ga = acc!(*a);
                        for r in 0..n {
                            let dr = dp.data()[r];
                            for c in 0..m {
                                ga[r * m + c] += dr * vx.data()[c];
                            }
                        }
                    }
                    let gx = acc!(*x);
                    for r in 0..n {
                        let dr = dp.data()[r];
                        for c in 0..m {
                            gx[c] += dr * va.data()[r * m + c];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let ds = dp.data()[0];
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    axpy(acc!(*a), vb.data(), ds);
                    axpy(acc!(*b), va.data(), ds);
                }
                Op::Tanh(a) => {
                    let y = entry.value.data();
                    let ga = acc!(*a);
                    for k in 0..y.len() {
                        ga[k] += dp.data()[k] * (F::one() - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = entry.value.data();
                    let ga = acc!(*a);
                    for k in 0..y.len() {
                        ga[k] += dp.data()[k] * y[k] * (F::one() - y[k]);
                    }
                }
                Op::Exp(a) => {
                    let y = entry.value.data();
                    let ga = acc!(*a);
                    for k in 0..y.len() {
                        ga[k] += dp.data()[k] * y[k];
                    }
                }
                Op::Log(a) => {
                    let va = nodes[a.0].value.data();
                    let ga = acc!(*a);
                    for k in 0..va.len() {
                        ga[k] += dp.data()[k] / va[k];
                    }
                }
                Op::SoftmaxTemp(a, tau) => {
                    let y = entry.value.data();
                    let s = kernels::dot_slices(dp.data(), y);
                    let ga = acc!(*a);
                    for k in 0..y.len() {
                        ga[k] += y[k] * (dp.data()[k] - s) / *tau;
                    }
                }
                Op::LogSoftmaxTemp(a, tau) => {
                    let y = entry.value.data();
                    let s: F = dp.data().iter().cloned().sum();
                    let ga = acc!(*a);
                    for k in 0..y.len() {
                        ga[k] += (dp.data()[k] - y[k].exp() * s) / *tau;
                    }
                }
                Op::L2Normalize(a) => {
                    let y = entry.value.data();
                    let norm = nodes[a.0].value.l2_norm();
                    let s = kernels::dot_slices(dp.data(), y);
                    let ga = acc!(*a);
                    for k in 0..y.len() {
                        ga[k] += (dp.data()[k] - y[k] * s) / norm;
                    }
                }
                Op::L2NormalizeRows(a) => {
                    let va = &nodes[a.0].value;
                    let (n, m) = (va.rows(), va.cols());
                    let ga = acc!(*a);
                    for r in 0..n {
                        let row = va.row(r);
                        let yrow = &entry.value.data()[r * m..(r + 1) * m];
                        let drow = &dp.data()[r * m..(r + 1) * m];
                        let norm = kernels::dot_slices(row, row).sqrt();
                        let s = kernels::dot_slices(drow, yrow);
                        for c in 0..m {
                            ga[r * m + c] += (drow[c] - yrow[c] * s) / norm;
                        }
                    }
                }
                Op::Aosm(a, tau) => {
                    let va = &nodes[a.0].value;
                    let w = kernels::softmax_slice(va.data(), *tau);
                    let out = entry.value.data()[0];
                    let ds = dp.data()[0];
                    let ga = acc!(*a);
                    for k in 0..w.len() {
                        ga[k] += ds * w[k] * (F::one() + (va.data()[k] - out) / *tau);
                    }
                }
                Op::AosmRows(a, tau) => {
                    let va = &nodes[a.0].value;
                    let (n, m) = (va.rows(), va.cols());
                    let ga = acc!(*a);
                    for r in 0..n {
                        let row = va.row(r);
                        let w = kernels::softmax_slice(row, *tau);
                        let out = entry.value.data()[r];
                        let dr = dp.data()[r];
                        for c in 0..m {
                            ga[r * m + c] += dr * w[c] * (F::one() + (row[c] - out) / *tau);
                        }
                    }
                }
                Op::AosmCols(a, tau) => {
                    let va = &nodes[a.0].value;
                    let (n, m) = (va.rows(), va.cols());
                    let ga = acc!(*a);
                    let mut col = vec![F::zero(); n];
                    for c in 0..m {
                        for r in 0..n {
                            col[r] = va.data()[r * m + c];
                        }
                        let w = kernels::softmax_slice(&col, *tau);
                        let out = entry.value.data()[c];
                        let dc = dp.data()[c];
                        for r in 0..n {
                            ga[r * m + c] += dc * w[r] * (F::one() + (col[r] - out) / *tau);
                        }
                    }
                }
                Op::MeanAxis(a, axis) => {
                    let va = &nodes[a.0].value;
                    let (n, m) = (va.rows(), va.cols());
                    let ga = acc!(*a);
                    if *axis == 0 {
                        let inv = F::from_usize(n).unwrap().recip();
                        for r in 0..n {
                            for c in 0..m {
                                ga[r * m + c] += dp.data()[c] * inv;
                            }
                        }
                    } else {
                        let inv = F::from_usize(m).unwrap().recip();
                        for r in 0..n {
                            for c in 0..m {
                                ga[r * m + c] += dp.data()[r] * inv;
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let ds = dp.data()[0];
                    let ga = acc!(*a);
                    for g in ga.iter_mut() {
                        *g += ds;
                    }
                }
                Op::MeanAll(a) => {
                    let numel = nodes[a.0].value.numel();
                    let ds = dp.data()[0] / F::from_usize(numel).unwrap();
                    let ga = acc!(*a);
                    for g in ga.iter_mut() {
                        *g += ds;
                    }
                }
                Op::ConcatVec(parts) => {
                    let mut off = 0;
                    for p in parts.clone() {
                        let len = nodes[p.0].value.numel();
                        axpy(acc!(p), &dp.data()[off..off + len], F::one());
                        off += len;
                    }
                }
                Op::StackRows(parts) => {
                    let m = nodes[parts[0].0].value.numel();
                    for (r, p) in parts.clone().into_iter().enumerate() {
                        axpy(acc!(p), &dp.data()[r * m..(r + 1) * m], F::one());
                    }
                }
                Op::StackScalars(parts) => {
                    for (k, p) in parts.clone().into_iter().enumerate() {
                        acc!(p)[0] += dp.data()[k];
                    }
                }
                Op::RowSlice(a, r) => {
                    let m = nodes[a.0].value.cols();
                    let ga = acc!(*a);
                    axpy(&mut ga[r * m..(r + 1) * m], dp.data(), F::one());
                }
                Op::Elem(a, flat) => {
                    acc!(*a)[*flat] += dp.data()[0];
                }
                Op::EmbedRows(table, ids) => {
                    let m = nodes[table.0].value.cols();
                    let gt = acc!(*table);
                    for (p, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * m..(id + 1) * m],
                            &dp.data()[p * m..(p + 1) * m],
                            F::one(),
                        );
                    }
                }
                Op::AddRowBroadcast(a, r) => {
                    axpy(acc!(*a), dp.data(), F::one());
                    let (n, m) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let gr = acc!(*r);
                    for i in 0..n {
                        for c in 0..m {
                            gr[c] += dp.data()[i * m + c];
                        }
                    }
                }
                Op::Reshape(a) => {
                    axpy(acc!(*a), dp.data(), F::one());
                }
                Op::MinElem(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    {
                        let ga = acc!(*a);
                        for k in 0..ga.len() {
                            if va.data()[k] <= vb.data()[k] {
                                ga[k] += dp.data()[k];
                            }
                        }
                    }
                    let gb = acc!(*b);
                    for k in 0..gb.len() {
                        if va.data()[k] > vb.data()[k] {
                            gb[k] += dp.data()[k];
                        }
                    }
                }
                Op::ClampConst(a, lo, hi) => {
                    let va = nodes[a.0].value.clone();
                    let ga = acc!(*a);
                    for k in 0..ga.len() {
                        if va.data()[k] >= *lo && va.data()[k] <= *hi {
                            ga[k] += dp.data()[k];
                        }
                    }
                }
            }

            grads[i] = Some(d);
        }

        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite(
                    "backward produced a NaN or Inf gradient".into(),
                ));
            }
        }
        Ok(Gradients { grads })
    }
}

fn axpy<F: Scalar>(dst: &mut [F], src: &[F], c: F) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s * c;
    }
}

/// `dst += d ⊙ other`
fn mul_axpy<F: Scalar>(dst: &mut [F], d: &[F], other: &[F]) {
    for ((g, x), y) in dst.iter_mut().zip(d).zip(other) {
        *g += *x * *y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::fd::central_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product::<usize>().max(1);
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Reduce any node to a scalar with fixed, non-uniform weights so the
    /// finite-difference probe is sensitive to every output entry.
    fn scalarize(tape: &mut Tape<f64>, n: Node) -> Node {
        if tape.value(n).is_scalar() {
            return n;
        }
        let shape = tape.value(n).shape().to_vec();
        let numel = tape.value(n).numel();
        let w = Tensor::new(
            shape,
            (0..numel).map(|i| 0.3 + 0.7 * ((i as f64) * 1.9).sin()).collect(),
        )
        .unwrap();
        let c = tape.constant(w).unwrap();
        let m = tape.mul(n, c).unwrap();
        tape.sum_all(m).unwrap()
    }

    /// Check analytic gradients of `build` against central differences with
    /// respect to every input.
    fn fd_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Node]) -> Node) {
        let mut tape = Tape::new();
        let ns: Vec<Node> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let loss = build(&mut tape, &ns);
        assert!(tape.value(loss).is_scalar(), "builder must end in a scalar");
        let grads = tape.backward(loss).unwrap();

        for (k, t0) in inputs.iter().enumerate() {
            let analytic = grads.grad_or_zero(ns[k], t0.shape());
            let fd = central_difference_grad(
                &mut |x: &Tensor<f64>| {
                    let mut tape = Tape::new();
                    let ns: Vec<Node> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            tape.param(if j == k { x.clone() } else { t.clone() }).unwrap()
                        })
                        .collect();
                    let l = build(&mut tape, &ns);
                    Ok(tape.value(l).scalar_value()?)
                },
                t0,
                1e-5,
            )
            .unwrap();
            let diff = analytic.max_abs_diff(&fd).unwrap();
            assert!(
                diff < 1e-6,
                "input {k}: analytic {analytic:?} vs fd {fd:?} (diff {diff:.3e})"
            );
        }
    }

    #[test]
    fn hand_checked_linear_gradient() {
        // loss = sum(2a + b) ⇒ ∂/∂a = 2, ∂/∂b = 1 everywhere.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let b = tape.param(Tensor::vector(vec![0.5, 0.5, 0.5])).unwrap();
        let a2 = tape.scale(a, 2.0).unwrap();
        let s = tape.add(a2, b).unwrap();
        let loss = tape.sum_all(s).unwrap();
        assert_eq!(tape.value(loss).data()[0], 5.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn same_node_used_twice_accumulates() {
        // loss = x·x ⇒ ∂/∂x = 2x.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -0.5])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn consumed_tape_rejects_further_use() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        tape.backward(x).unwrap();
        assert!(matches!(tape.param(Tensor::scalar(1.0)), Err(Error::Contract(_))));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn untouched_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.param(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let loss = tape.scale(x, 3.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.grad_or_zero(y, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_near_zero_gradient_blowup_is_surfaced() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1e-320, 1.0])).unwrap();
        let l = tape.log(x).unwrap();
        let loss = tape.sum_all(l).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fd_elementwise_and_scaling_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        fd_check(&[a.clone(), b.clone()], &|t, n| {
            let s = t.add(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone(), b.clone()], &|t, n| {
            let s = t.sub(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone(), b.clone()], &|t, n| {
            let s = t.mul(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone()], &|t, n| {
            let s = t.scale(n[0], -1.7).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a], &|t, n| {
            let s = t.add_const(n[0], 0.9).unwrap();
            scalarize(t, s)
        });
    }

    #[test]
    fn fd_matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3, 2], &mut rng, -1.0, 1.0);
        let bt = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
        let x = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        fd_check(&[a.clone(), b], &|t, n| {
            let s = t.matmul(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone(), bt], &|t, n| {
            let s = t.matmul_nt(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone()], &|t, n| {
            let s = t.transpose(n[0]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone(), x.clone()], &|t, n| {
            let s = t.matvec(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[x.clone(), x.clone()], &|t, n| t.dot(n[0], n[1]).unwrap());
        fd_check(&[a.clone()], &|t, n| {
            let s = t.reshape(n[0], vec![6]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone(), x], &|t, n| {
            let s = t.add_row_broadcast(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone()], &|t, n| {
            let s = t.mean_axis(n[0], 0).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone()], &|t, n| {
            let s = t.mean_axis(n[0], 1).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone()], &|t, n| {
            let s = t.row_slice(n[0], 1).unwrap();
            scalarize(t, s)
        });
        fd_check(&[a.clone()], &|t, n| t.elem(n[0], 4).unwrap());
        fd_check(&[a.clone()], &|t, n| t.sum_all(n[0]).unwrap());
        fd_check(&[a], &|t, n| t.mean_all(n[0]).unwrap());
    }

    #[test]
    fn fd_nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = rand_tensor(&[4], &mut rng, -1.5, 1.5);
        let pos = rand_tensor(&[4], &mut rng, 0.5, 1.5);
        fd_check(&[v.clone()], &|t, n| {
            let s = t.tanh(n[0]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[v.clone()], &|t, n| {
            let s = t.sigmoid(n[0]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[v.clone()], &|t, n| {
            let s = t.exp(n[0]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[pos.clone()], &|t, n| {
            let s = t.log(n[0]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[v.clone()], &|t, n| {
            let s = t.softmax_temp(n[0], 0.7).unwrap();
            scalarize(t, s)
        });
        fd_check(&[v.clone()], &|t, n| {
            let s = t.log_softmax_temp(n[0], 1.3).unwrap();
            scalarize(t, s)
        });
        fd_check(&[pos], &|t, n| {
            let s = t.l2_normalize(n[0]).unwrap();
            scalarize(t, s)
        });
        let m = rand_tensor(&[3, 2], &mut rng, 0.4, 1.4);
        fd_check(&[m], &|t, n| {
            let s = t.l2_normalize_rows(n[0]).unwrap();
            scalarize(t, s)
        });
        fd_check(&[v], &|t, n| t.aosm(n[0], 0.8).unwrap());
    }

    #[test]
    fn fd_aosm_matrix_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
        fd_check(&[m.clone()], &|t, n| {
            let s = t.aosm_rows(n[0], 1.1).unwrap();
            scalarize(t, s)
        });
        fd_check(&[m.clone()], &|t, n| {
            let s = t.aosm_cols(n[0], 0.9).unwrap();
            scalarize(t, s)
        });
        // Bi-level aggregation exactly as the alignment score uses it.
        fd_check(&[m], &|t, n| {
            let rows = t.aosm_rows(n[0], 1.0).unwrap();
            let cols = t.aosm_cols(n[0], 1.0).unwrap();
            let ra = t.aosm(rows, 1.0).unwrap();
            let ca = t.aosm(cols, 1.0).unwrap();
            let s = t.add(ra, ca).unwrap();
            t.scale(s, 0.5).unwrap()
        });
    }

    #[test]
    fn fd_assembly_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let v2 = rand_tensor(&[2], &mut rng, -1.0, 1.0);
        let v3 = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        let sc = Tensor::scalar(rng.gen_range(-1.0..1.0));
        fd_check(&[v2.clone(), sc.clone(), v3.clone()], &|t, n| {
            let s = t.concat_vec(n).unwrap();
            scalarize(t, s)
        });
        let r1 = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        let r2 = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        fd_check(&[v3.clone(), r1, r2], &|t, n| {
            let s = t.stack_rows(n).unwrap();
            scalarize(t, s)
        });
        let s1 = Tensor::scalar(0.4);
        let s2 = Tensor::scalar(-1.1);
        fd_check(&[s1, sc, s2], &|t, n| {
            let s = t.stack_scalars(n).unwrap();
            scalarize(t, s)
        });
        let table = rand_tensor(&[5, 3], &mut rng, -1.0, 1.0);
        // Duplicate ids: their gradient contributions must accumulate.
        fd_check(&[table], &|t, n| {
            let s = t.embed_rows(n[0], &[4, 0, 2, 0]).unwrap();
            scalarize(t, s)
        });
    }

    #[test]
    fn fd_clipping_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        // Keep every entry away from clamp boundaries and min ties so the
        // central difference does not straddle a kink.
        let a = rand_tensor(&[2, 3], &mut rng, -2.0, 2.0);
        let a = Tensor::new(
            vec![2, 3],
            a.data()
                .iter()
                .map(|x| {
                    let d = (x - 0.9).abs().min((x + 0.9).abs());
                    if d < 1e-3 { x + 0.01 } else { *x }
                })
                .collect(),
        )
        .unwrap();
        fd_check(&[a.clone()], &|t, n| {
            let s = t.clamp_const(n[0], -0.9, 0.9).unwrap();
            scalarize(t, s)
        });
        let b = Tensor::new(
            vec![2, 3],
            a.data().iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { 0.5 } else { -0.5 }).collect(),
        )
        .unwrap();
        fd_check(&[a, b], &|t, n| {
            let s = t.min_elem(n[0], n[1]).unwrap();
            scalarize(t, s)
        });
    }

    #[test]
    fn corrupted_backward_disagrees_with_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v = rand_tensor(&[4], &mut rng, -1.0, 1.0);

        let mut tape = Tape::new();
        tape.set_gradient_corruption(OpKind::Tanh, 1.5);
        let x = tape.param(v.clone()).unwrap();
        let h = tape.tanh(x).unwrap();
        let loss = scalarize(&mut tape, h);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.grad(x).unwrap().clone();

        let fd = central_difference_grad(
            &mut |p: &Tensor<f64>| {
                let mut t = Tape::new();
                let x = t.param(p.clone()).unwrap();
                let h = t.tanh(x).unwrap();
                let l = scalarize(&mut t, h);
                Ok(t.value(l).scalar_value()?)
            },
            &v,
            1e-5,
        )
        .unwrap();
        let diff = analytic.max_abs_diff(&fd).unwrap();
        assert!(diff > 1e-3, "corruption went undetected (diff {diff:.3e})");
    }

    #[test]
    fn gru_style_composition_matches_fd() {
        // A miniature recurrent composition: two chained nonlinear mixes that
        // reuse the same parameter, exercising accumulation across time.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let w = rand_tensor(&[3, 3], &mut rng, -0.7, 0.7);
        let h0 = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        fd_check(&[w, h0], &|t, n| {
            let mut h = n[1];
            for _ in 0..3 {
                let z = t.matvec(n[0], h).unwrap();
                h = t.tanh(z).unwrap();
            }
            let s = t.sum_all(h).unwrap();
            t.scale(s, 0.5).unwrap()
        });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// The softmax-weighted self-aggregation lies between the mean
            /// and the max of its input, approaching each at extreme
            /// temperatures.
            #[test]
            fn aosm_between_mean_and_max(
                xs in proptest::collection::vec(-5.0f64..5.0, 2..8)
            ) {
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let a = kernels::aosm_slice(&xs, 1.0);
                prop_assert!(a >= mean - 1e-12, "{a} < mean {mean}");
                prop_assert!(a <= max + 1e-12, "{a} > max {max}");
                let hot = kernels::aosm_slice(&xs, 1e9);
                prop_assert!((hot - mean).abs() < 1e-6);
                let cold = kernels::aosm_slice(&xs, 1e-6);
                prop_assert!((cold - max).abs() < 1e-4);
            }

            /// Backward of a random small composition is finite and matches
            /// finite differences.
            #[test]
            fn random_chain_matches_fd(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = rand_tensor(&[3], &mut rng, -1.0, 1.0);
                fd_check(&[v], &|t, n| {
                    let a = t.tanh(n[0]).unwrap();
                    let b = t.softmax_temp(a, 0.8).unwrap();
                    let c = t.aosm(b, 1.0).unwrap();
                    let d = t.exp(c).unwrap();
                    t.sum_all(d).unwrap()
                });
            }
        }
    }
}
