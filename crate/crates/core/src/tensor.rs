//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid topological order
//! because a node can only reference earlier nodes.
//!
//! ```
//! use mpseg::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use crate::kernels;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: cannot broadcast {rhs:?} onto {lhs:?}")]
    Broadcast {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs matches the trailing axis of lhs
    Row,
    /// rhs has a single element
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    MaskedFill { x: Var, block: Vec<bool> },
    Sum(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    BceWithLogits { x: Var, target: Vec<f64> },
    DiceRows { x: Var, target: Vec<f64> },
    CrossEntropyRows {
        x: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// Records a forward computation and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMulNt(a, b), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            Ok(Broadcast::Row)
        } else if sb.iter().product::<usize>() == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(TensorError::Broadcast {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, bc: Broadcast, f: fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = match bc {
            Broadcast::Same => av.data().iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Row => {
                let c = bv.len();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| f(*x, bv[i % c]))
                    .collect()
            }
            Broadcast::Scalar => av.data().iter().map(|x| f(*x, bv[0])).collect(),
        };
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    /// Elementwise sum; `b` may equal `a`'s shape, be a vector over the last
    /// axis, or hold a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("add", a, b)?;
        let value = self.broadcast_binary(a, b, bc, |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b, bc), rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("mul", a, b)?;
        let value = self.broadcast_binary(a, b, bc, |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b, bc), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        kernels::scale_in_place(&mut value.data, c);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v += c);
        let rg = self.needs(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        kernels::relu_in_place(&mut value.data);
        let rg = self.needs(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
        let rg = self.needs(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Normalizes each last-axis slice to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (data, rstd) = kernels::layer_norm_rows(x.data(), x.cols());
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.needs(a);
        self.push(value, Op::LayerNorm { x: a, rstd }, rg)
    }

    /// Layer normalization followed by a per-feature scale and shift.
    pub fn layer_norm_affine(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.layer_norm(a);
        let s = self.mul(n, gamma)?;
        self.add(s, beta)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite("softmax_lastdim"));
        }
        let mut value = x.clone();
        let cols = value.cols();
        kernels::softmax_rows(&mut value.data, cols);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Replaces entries where `block` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, block: &[bool], fill: f64) -> Result<Var> {
        let x = self.value(a);
        if block.len() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: x.shape().to_vec(),
                rhs: vec![block.len()],
            });
        }
        let mut value = x.clone();
        kernels::masked_fill_in_place(&mut value.data, block, fill);
        let rg = self.needs(a);
        Ok(self.push(
            value,
            Op::MaskedFill {
                x: a,
                block: block.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gathers rows of a 2-D tensor (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.needs(a);
        Ok(self.push(
            value,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if start >= end || end > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                extent: r,
            });
        }
        let value = Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SliceRows { x: a, start }, rg))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean sigmoid cross-entropy between logits and fixed targets in [0,1].
    pub fn bce_with_logits(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(a);
        if target.len() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = x.numel() as f64;
        let loss = x
            .data()
            .iter()
            .zip(target)
            .map(|(&v, &t)| kernels::softplus(v) - v * t)
            .sum::<f64>()
            / n;
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x: a,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of the smoothed dice loss
    /// `1 − (2Σpt + ε)/(Σp + Σt + ε)` with `p = sigmoid(x)`.
    pub fn dice_rows(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(a);
        if target.len() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "dice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let c = x.cols();
        let rows = x.rows();
        let mut total = 0.0;
        for r in 0..rows {
            total += dice_value(&x.data()[r * c..(r + 1) * c], &target[r * c..(r + 1) * c]);
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::DiceRows {
                x: a,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted mean of per-row softmax cross-entropy:
    /// `Σ wᵢ·(−log softmax(xᵢ)[lᵢ]) / Σ wᵢ`.
    pub fn cross_entropy_rows(&mut self, a: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        if labels.len() != rows || weights.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy_rows",
                index: bad,
                extent: c,
            });
        }
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[labels[r]]);
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::scalar(loss / wsum),
            Op::CrossEntropyRows {
                x: a,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => kernels::add_in_place(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        // Leaves that did not take part still report a zero gradient.
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => kernels::add_in_place(existing, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.needs(*a) {
                    acc(*a, kernels::matmul_nt(g, bv.data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(*b, kernels::matmul_tn(av.data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[0]);
                if self.needs(*a) {
                    acc(*a, kernels::matmul(g, bv.data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(*b, kernels::matmul_tn(g, av.data(), m, n, k));
                }
            }
            Op::Add(a, b, bc) => {
                acc(*a, g.to_vec());
                if self.needs(*b) {
                    acc(*b, reduce_broadcast(g, *bc, self.value(*b).numel()));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = match bc {
                        Broadcast::Same => g.iter().zip(bv).map(|(g, y)| g * y).collect(),
                        Broadcast::Row => g
                            .iter()
                            .enumerate()
                            .map(|(j, g)| g * bv[j % bv.len()])
                            .collect(),
                        Broadcast::Scalar => g.iter().map(|g| g * bv[0]).collect(),
                    };
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    acc(*b, reduce_broadcast(&prod, *bc, bv.len()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::LayerNorm { x, rstd } => {
                let xhat = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gx = kernels::dot(gr, xr) / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rs * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*a, dx);
            }
            Op::MaskedFill { x, block } => acc(
                *x,
                g.iter()
                    .zip(block)
                    .map(|(g, b)| if *b { 0.0 } else { *g })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    kernels::add_in_place(&mut dx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
                acc(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                let scale = g[0] / xv.len() as f64;
                acc(
                    *x,
                    xv.iter()
                        .zip(target)
                        .map(|(v, t)| scale * (kernels::sigmoid(*v) - t))
                        .collect(),
                );
            }
            Op::DiceRows { x, target } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let rows = xv.rows();
                let scale = g[0] / rows as f64;
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    let xr = &xv.data()[r * c..(r + 1) * c];
                    let tr = &target[r * c..(r + 1) * c];
                    let p: Vec<f64> = xr.iter().map(|v| kernels::sigmoid(*v)).collect();
                    let num = 2.0 * kernels::dot(&p, tr) + DICE_EPS;
                    let den = p.iter().sum::<f64>() + tr.iter().sum::<f64>() + DICE_EPS;
                    for j in 0..c {
                        // d(1 - num/den)/dp_j
                        let dp = -(2.0 * tr[j] * den - num) / (den * den);
                        dx[r * c + j] = scale * dp * p[j] * (1.0 - p[j]);
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropyRows { x, labels, weights } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let wsum: f64 = weights.iter().sum();
                let mut probs = xv.data().to_vec();
                kernels::softmax_rows(&mut probs, c);
                for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                    let s = g[0] * w / wsum;
                    for j in 0..c {
                        let ind = if j == l { 1.0 } else { 0.0 };
                        probs[r * c + j] = s * (probs[r * c + j] - ind);
                    }
                }
                acc(*x, probs);
            }
        }
    }
}

fn reduce_broadcast(g: &[f64], bc: Broadcast, n: usize) -> Vec<f64> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::Row => {
            let mut out = vec![0.0; n];
            for (j, v) in g.iter().enumerate() {
                out[j % n] += v;
            }
            out
        }
        Broadcast::Scalar => vec![g.iter().sum()],
    }
}

/// Smoothed dice loss of one row of logits against a target row.
pub fn dice_value(logits: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (x, t) in logits.iter().zip(target) {
        let p = kernels::sigmoid(*x);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, vec![3, 4]);
        let b = random_tensor(&mut rng, vec![4, 2]);
        let w = random_tensor(&mut rng, vec![3, 2]);
        let report = check_gradient(&[a, b], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let wv = t.constant(w.clone());
            let s = t.mul(p, wv)?;
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = t.softmax_lastdim(x).unwrap();
        assert!(close(t.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

        let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = t.softmax_lastdim(x).unwrap();
        assert!(close(t.value(s).data(), &[1.0, 0.0], 1e-12));

        let x = t.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert_eq!(t.softmax_lastdim(x), Err(TensorError::NonFinite("softmax_lastdim")));
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, vec![5]);
        // Each output coordinate in turn, so the full Jacobian is covered.
        for k in 0..5 {
            let mut sel = vec![0.0; 5];
            sel[k] = 1.0;
            let report = check_gradient(std::slice::from_ref(&x), |t, v| {
                let s = t.softmax_lastdim(v[0])?;
                let w = t.constant(Tensor::vector(sel.clone()));
                let p = t.mul(s, w)?;
                Ok(t.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "row {k}: {report:?}");
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -3.0, 3.0]));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);

        let x = t.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let n = t.layer_norm(x);
        assert!(close(t.value(n).data(), &[-1.2247, 0.0, 1.2247], 1e-3));
        let d = t.value(n).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn broadcast_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2]));
        assert!(matches!(t.add(a, b), Err(TensorError::Broadcast { .. })));
        let row = t.constant(Tensor::zeros(vec![3]));
        assert!(t.mul(a, row).is_ok());
    }

    #[test]
    fn masked_fill_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.masked_fill(x, &[false; 4], -1e9).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());

        let y = t.masked_fill(x, &[true; 4], -1e9).unwrap();
        assert_eq!(t.value(y).data(), &[-1e9; 4]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0; 4]);

        assert!(matches!(
            t.masked_fill(x, &[true; 3], 0.0),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn masked_fill_gradient_blocks_entries() {
        let block = [true, false, false, true];
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 1.5]).unwrap();
        let report = check_gradient(std::slice::from_ref(&x), |t, v| {
            let y = t.masked_fill(v[0], &block, -1e9)?;
            let s = t.softmax_lastdim(y)?;
            let w = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let p = t.mul(s, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.analytic[0][0], 0.0);
        assert_eq!(report.analytic[0][3], 0.0);
        assert_eq!(report.numeric[0][0], 0.0);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
        // accumulation
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());

        // detached loss yields zero gradients
        let d = t.detach(loss);
        let c = t.scale(d, 3.0);
        t.backward(c).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);

        assert!(matches!(t.backward(sq), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn forward_does_not_mutate_inputs() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.5, 2.0]));
        let before = t.value(x).clone();
        let r = t.relu(x);
        let s = t.sigmoid(r);
        let _ = t.layer_norm(s);
        let _ = t.masked_fill(x, &[true, true, true], 0.0).unwrap();
        assert_eq!(t.value(x), &before);
    }

    #[test]
    fn loss_ops_match_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let d = t.dice_rows(x, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((t.value(d).data()[0] - 0.4).abs() < 1e-12);
        let b = t.bce_with_logits(x, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((t.value(b).data()[0] - 2f64.ln()).abs() < 1e-12);

        let x = t.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let ce = t.cross_entropy_rows(x, &[1], &[1.0]).unwrap();
        assert!((t.value(ce).data()[0] - 3f64.ln()).abs() < 1e-12);
    }
}
