//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs and whatever intermediates its
//! vector-Jacobian product needs. [`Tape::backward`] walks the records in
//! reverse once and routes leaf adjoints into the [`ParameterStore`]s that own
//! them. Nodes that depend on no parameter are skipped entirely.

use std::collections::HashMap;

use super::{gemm, ParameterStore, StoreId, Tensor};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { store: StoreId, index: usize },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Dropout(Var, Tensor),
    GaussianLogDensity { x: Var, mu: Var, sigma: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(StoreId, usize), Var>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Stop-gradient: the value is copied as a constant, cutting the graph.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Leaf bound to a named parameter of `store`. Repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let index = store.index_of(name)?;
        let key = (store.id(), index);
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let v = self.push(store.value_at(index).clone(), Op::Param { store: store.id(), index }, true);
        self.params.insert(key, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), m, k, false, self.value(b).data(), k2, n, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt: {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), m, k, false, self.value(b).data(), n, k2, true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `m x n` plus a length-`n` row broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.value(row).numel() != n {
            return Err(Error::shape(format!(
                "add_row: {m}x{n} plus {:?}",
                self.value(row).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.value(col).numel() != m {
            return Err(Error::shape(format!(
                "mul_col: {m}x{n} by {:?}",
                self.value(col).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data();
        for (chunk, s) in out.data_mut().chunks_mut(n.max(1)).zip(c) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("min", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f64::min);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Min(a, b), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols: no inputs"))?;
        let m = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(Error::shape(format!("concat_cols: row counts {m} and {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + offset..i * n + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows: no inputs"))?;
        let n = self.dims(first)?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(Error::shape(format!("concat_rows: column counts {n} and {c}")));
            }
            out.extend_from_slice(self.value(p).data());
            m += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start > end || end > n {
            return Err(Error::Bounds(format!("slice_cols {start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start > end || end > m {
            return Err(Error::Bounds(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(end - start, n, out)?, Op::SliceRows(a, start), ng))
    }

    /// Rows picked by `indices`, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Bounds(format!("gather_rows index {i} of {m} rows")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(indices.len(), n, out)?, Op::GatherRows(a, indices.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Flattens to a `1 x numel` row.
    pub fn flatten_row(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.reshape(a, &[1, n])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if m != 1 {
            return Err(Error::shape(format!("broadcast_rows expects one row, got {m}x{n}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::BroadcastRows(a), ng))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Per-row sums as an `m x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::SumCols(a), ng))
    }

    /// Per-column sums as a `1 x n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::SumRows(a), ng))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(format!(
                "layer_norm: {n} columns but affine lengths {} and {}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = var + eps;
            // A constant row with eps = 0 normalizes to zeros.
            let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let xhat = Tensor::matrix(m, n, xhat)?;
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Multiplies by a precomputed mask (already scaled by `1 / (1 - rate)`).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        same_shape("dropout", self.value(a), &mask)?;
        let out = self.value(a).zip_map(&mask, |x, k| x * k);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    /// Row-wise diagonal Gaussian log-density `sum_j log N(x_ij; mu_ij, sigma_ij^2)` as an `m x 1` column.
    pub fn gaussian_log_density(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        same_shape("gaussian_log_density", self.value(x), self.value(mu))?;
        same_shape("gaussian_log_density", self.value(x), self.value(sigma))?;
        let (m, n) = self.dims(x)?;
        let (xs, ms, ss) = (self.value(x).data(), self.value(mu).data(), self.value(sigma).data());
        let out: Vec<f64> = (0..m)
            .map(|i| {
                (i * n..(i + 1) * n)
                    .map(|k| {
                        let z = (xs[k] - ms[k]) / ss[k];
                        -0.5 * z * z - ss[k].ln() - HALF_LN_2PI
                    })
                    .sum()
            })
            .collect();
        let ng = self.ng(x) || self.ng(mu) || self.ng(sigma);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::GaussianLogDensity { x, mu, sigma }, ng))
    }

    /// Reverse pass from a one-element `loss`, adding `d loss / d param` into the
    /// gradient buffers of whichever of `stores` own the recorded parameters.
    /// Parameters of stores not listed are left untouched.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParameterStore]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Param { store, index } => {
                    if let Some(s) = stores.iter_mut().find(|s| s.id() == *store) {
                        s.grad_at_mut(*index).add_assign(&g);
                    }
                }
                op => self.backprop_op(op, &node.value, g, &mut adj)?,
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn adj_buffer<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        adj[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
    }

    fn backprop_op(&self, op: &Op, out: &Tensor, g: Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Constant | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                if self.ng(*a) {
                    // dA = G * B^T
                    let buf = self.adj_buffer(adj, *a);
                    gemm(g.data(), m, n, false, self.value(*b).data(), k, n, true, buf.data_mut(), 1.0);
                }
                if self.ng(*b) {
                    // dB = A^T * G
                    let buf = self.adj_buffer(adj, *b);
                    gemm(self.value(*a).data(), m, k, true, g.data(), m, n, false, buf.data_mut(), 1.0);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                if self.ng(*a) {
                    // dA = G * B
                    let buf = self.adj_buffer(adj, *a);
                    gemm(g.data(), m, n, false, self.value(*b).data(), n, k, false, buf.data_mut(), 1.0);
                }
                if self.ng(*b) {
                    // dB = G^T * A
                    let buf = self.adj_buffer(adj, *b);
                    gemm(g.data(), m, n, true, self.value(*a).data(), m, k, false, buf.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *b, g.clone());
                self.accumulate(adj, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *b, g.map(|v| -v));
                self.accumulate(adj, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(adj, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    let n = self.value(*row).numel();
                    let mut gr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(adj, *row, Tensor::new(shape, gr)?);
                }
                self.accumulate(adj, *a, g);
            }
            Op::MulCol(a, col) => {
                let (_, n) = self.dims(*a)?;
                let n = n.max(1);
                if self.ng(*col) {
                    let gc: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(self.value(*a).data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    let shape = self.value(*col).shape().to_vec();
                    self.accumulate(adj, *col, Tensor::new(shape, gc)?);
                }
                if self.ng(*a) {
                    let mut ga = g;
                    for (chunk, s) in ga.data_mut().chunks_mut(n).zip(self.value(*col).data()) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(adj, *a, ga);
                }
            }
            Op::Scale(a, f) => self.accumulate(adj, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g),
            Op::Tanh(a) => self.accumulate(adj, *a, g.zip_map(out, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(adj, *a, g.zip_map(out, |d, y| d * y * (1.0 - y))),
            Op::Softplus(a) => {
                self.accumulate(adj, *a, g.zip_map(self.value(*a), |d, x| d * sigmoid(x)))
            }
            Op::Relu(a) => self.accumulate(
                adj,
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Gelu(a) => self.accumulate(adj, *a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))),
            Op::Exp(a) => self.accumulate(adj, *a, g.zip_map(out, |d, y| d * y)),
            Op::Square(a) => self.accumulate(adj, *a, g.zip_map(self.value(*a), |d, x| 2.0 * d * x)),
            Op::Clamp(a, lo, hi) => self.accumulate(
                adj,
                *a,
                g.zip_map(self.value(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 }),
            ),
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for ((d, x), y) in ga.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        if x > y {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(adj, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = g;
                    for ((d, x), y) in gb.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        if x <= y {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g.data()[i * n + offset..i * n + offset + w]);
                        }
                        self.accumulate(adj, p, Tensor::matrix(m, w, gp)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.dims(p)?.0;
                    if self.ng(p) {
                        let gp = g.data()[offset * n..(offset + r) * n].to_vec();
                        self.accumulate(adj, p, Tensor::matrix(r, n, gp)?);
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, w) = g.dims2()?;
                let n = self.dims(*a)?.1;
                let buf = self.adj_buffer(adj, *a);
                let d = buf.data_mut();
                for i in 0..m {
                    for j in 0..w {
                        d[i * n + start + j] += g.data()[i * w + j];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let n = g.cols();
                let buf = self.adj_buffer(adj, *a);
                for (d, v) in buf.data_mut()[start * n..].iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = g.cols();
                let buf = self.adj_buffer(adj, *a);
                let d = buf.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g.data()[r * n + j];
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(adj, *a, g.reshape(shape)?);
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()?),
            Op::BroadcastRows(a) => {
                let n = g.cols();
                let mut ga = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (o, v) in ga.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.accumulate(adj, *a, Tensor::matrix(1, n, ga)?);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(adj, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                let s = g.data()[0] / n;
                self.accumulate(adj, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::SumCols(a) => {
                let (m, n) = self.dims(*a)?;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n..(i + 1) * n].fill(g.data()[i]);
                }
                self.accumulate(adj, *a, Tensor::matrix(m, n, ga)?);
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a)?;
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend_from_slice(g.data());
                }
                self.accumulate(adj, *a, Tensor::matrix(m, n, ga)?);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = vec![0.0; out.numel()];
                for ((gr, yr), o) in g.data().chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *a, Tensor::new(out.shape().to_vec(), ga)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = xhat.dims2()?;
                let gm = self.value(*gamma).data();
                if self.ng(*beta) {
                    let mut gb = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(adj, *beta, Tensor::new(shape, gb)?);
                }
                if self.ng(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(adj, *gamma, Tensor::new(shape, gg)?);
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let hr = &xhat.data()[i * n..(i + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = inv_std[i] / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(adj, *x, Tensor::matrix(m, n, gx)?);
                }
            }
            Op::Dropout(a, mask) => self.accumulate(adj, *a, g.zip_map(mask, |d, k| d * k)),
            Op::GaussianLogDensity { x, mu, sigma } => {
                let (m, n) = self.dims(*x)?;
                let (xs, ms, ss) = (self.value(*x).data(), self.value(*mu).data(), self.value(*sigma).data());
                let mut gx = vec![0.0; m * n];
                let mut gs = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..n {
                        let k = i * n + j;
                        let diff = xs[k] - ms[k];
                        let s2 = ss[k] * ss[k];
                        gx[k] = -gi * diff / s2;
                        gs[k] = gi * (diff * diff / (s2 * ss[k]) - 1.0 / ss[k]);
                    }
                }
                if self.ng(*mu) {
                    self.accumulate(adj, *mu, Tensor::matrix(m, n, gx.iter().map(|v| -v).collect())?);
                }
                if self.ng(*sigma) {
                    self.accumulate(adj, *sigma, Tensor::matrix(m, n, gs)?);
                }
                if self.ng(*x) {
                    self.accumulate(adj, *x, Tensor::matrix(m, n, gx)?);
                }
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a rank-2 tensor, computed with per-row max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (_, n) = m.dims2()?;
    let mut out = m.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut s = store_with("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let loss = tape.square(w);
        tape.backward(loss, &mut [&mut s]).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut s = store_with("x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        let loss = tape.tanh(x);
        tape.backward(loss, &mut [&mut s]).unwrap();
        assert_eq!(s.grad("x").unwrap().data(), &[1.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        // loss = w * w + w at w = 2 -> 2w + 1 = 5
        let mut s = store_with("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let w_again = tape.param(&s, "w").unwrap();
        assert_eq!(w, w_again);
        let sq = tape.mul(w, w_again).unwrap();
        let loss = tape.add(sq, w).unwrap();
        tape.backward(loss, &mut [&mut s]).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[5.0]);
    }

    #[test]
    fn backward_is_additive_across_calls() {
        let mut s = store_with("w", Tensor::scalar(3.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&s, "w").unwrap();
            let loss = tape.square(w);
            tape.backward(loss, &mut [&mut s]).unwrap();
        }
        assert_eq!(s.grad("w").unwrap().data(), &[12.0]);
    }

    #[test]
    fn empty_tape_and_non_scalar_loss_are_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0), &mut []), Err(Error::EmptyTape)));
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(v, &mut []), Err(Error::Shape(_))));
    }

    #[test]
    fn unused_parameter_gradient_stays_zero() {
        let mut s = ParameterStore::new();
        s.insert("used", Tensor::scalar(1.5)).unwrap();
        s.insert("unused", Tensor::scalar(-4.0)).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&s, "used").unwrap();
        let _ = tape.param(&s, "unused").unwrap();
        let loss = tape.square(u);
        tape.backward(loss, &mut [&mut s]).unwrap();
        assert_eq!(s.grad("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut s = store_with("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let sg = tape.stop_gradient(w);
        let loss = tape.mul(w, sg).unwrap();
        tape.backward(loss, &mut [&mut s]).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_examples() {
        let m = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = Tensor::from_rows(&[vec![0.0, 2f64.ln()]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.5, 0.0]]).unwrap();
        let shifted = x.map(|v| v + 1000.0);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_matrix() {
        assert!(matches!(softmax_rows(&Tensor::scalar(1.0)), Err(Error::Shape(_))));
        assert!(matches!(softmax_rows(&Tensor::zeros(&[2, 2, 2])), Err(Error::Shape(_))));
    }

    fn ln(tape: &mut Tape, rows: &[Vec<f64>], eps: f64) -> Tensor {
        let x = tape.constant(Tensor::from_rows(rows).unwrap());
        let n = rows[0].len();
        let g = tape.constant(Tensor::full(&[1, n], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, n]));
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        assert_eq!(ln(&mut tape, &[vec![4.0, 4.0, 4.0]], 1e-5).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(ln(&mut tape, &[vec![1.0, -1.0]], 0.0).data(), &[1.0, -1.0]);
        let once = ln(&mut tape, &[vec![0.5, 3.0, -2.0, 7.0]], 0.0);
        let twice = ln(&mut tape, &[once.data().to_vec()], 0.0);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_wrong_affine_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let g = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }
}
