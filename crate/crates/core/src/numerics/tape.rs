//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! whatever it needs for the vector-Jacobian product. Because nodes can only
//! refer to earlier nodes, walking the tape from the back visits operations
//! in exact reverse of forward order.

use std::sync::Arc;

use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask; `true` marks an entry that takes part in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", (rows, cols), (allowed.len(), 1)));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Row `i` unmasks exactly the keys in `neighbors[i]`.
    pub fn from_neighbor_lists(neighbors: &[Vec<usize>], n_keys: usize) -> Self {
        let mut allowed = vec![false; neighbors.len() * n_keys];
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                allowed[i * n_keys + j] = true;
            }
        }
        Self {
            rows: neighbors.len(),
            cols: n_keys,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Flat neighbor table: row `i` reads keys `indices[i * width .. (i + 1) * width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    pub width: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.width).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        shift: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    GatherDot {
        query: Var,
        key: Var,
        table: Arc<NeighborTable>,
    },
    GatherCombine {
        weights: Var,
        value: Var,
        table: Arc<NeighborTable>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Operation record for one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of the right shape when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with optional mask, using per-row max subtraction.
pub fn softmax_rows(m: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(Error::shape("softmax_rows mask", m.shape(), mask.shape()));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let allowed = |c: usize| mask.is_none_or(|mk| mk.is_allowed(r, c));
        let row = m.row(r);
        let max = (0..m.cols())
            .filter(|&c| allowed(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let dst = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..row.len() {
            if allowed(c) {
                let e = (row[c] - max).exp();
                dst[c] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Per-row layer normalization with biased variance. Returns the output, the
/// normalized (pre-affine) rows, and the per-row inverse standard deviation.
fn layer_norm_forward(
    x: &Matrix,
    gain: &Matrix,
    shift: &Matrix,
    eps: f64,
) -> (Matrix, Matrix, Vec<f64>) {
    let cols = x.cols();
    let mut out = Matrix::zeros(x.rows(), cols);
    let mut normalized = Matrix::zeros(x.rows(), cols);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(r);
        for c in 0..cols {
            nrow[c] = (row[c] - mean) * rstd;
        }
        let orow = out.row_mut(r);
        for c in 0..cols {
            orow[c] = nrow[c] * gain.data()[c] + shift.data()[c];
        }
    }
    (out, normalized, inv_std)
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = softmax_rows(self.value(a), mask)?;
        // Masked entries are exactly zero in the output, which is all the
        // backward rule needs to know about the mask.
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        if gv.len() != xv.cols() || sv.len() != xv.cols() {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (value, normalized, inv_std) = layer_norm_forward(xv, gv, sv, eps);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gain,
                shift,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::shape("slice_rows", av.shape(), (start, end)));
        }
        let value = av.slice_rows(start, end);
        Ok(self.push(value, Op::SliceRows { input: a, start }))
    }

    /// `out[i, j] = query[i] · key[table[i, j]]`.
    pub fn gather_dot(&mut self, query: Var, key: Var, table: &Arc<NeighborTable>) -> Result<Var> {
        let (qv, kv) = (self.value(query), self.value(key));
        if qv.cols() != kv.cols() || table.rows() != qv.rows() {
            return Err(Error::shape("gather_dot", qv.shape(), kv.shape()));
        }
        if table.indices.iter().any(|&j| j >= kv.rows()) {
            return Err(Error::InvalidArgument("neighbor index out of range".into()));
        }
        let w = table.width;
        let mut value = Matrix::zeros(qv.rows(), w);
        for i in 0..qv.rows() {
            let q = qv.row(i);
            for (j, &n) in table.row(i).iter().enumerate() {
                value.set(i, j, dot(q, kv.row(n)));
            }
        }
        Ok(self.push(
            value,
            Op::GatherDot {
                query,
                key,
                table: Arc::clone(table),
            },
        ))
    }

    /// `out[i] = Σ_j weights[i, j] · value[table[i, j]]`.
    pub fn gather_combine(
        &mut self,
        weights: Var,
        value: Var,
        table: &Arc<NeighborTable>,
    ) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(value));
        if wv.cols() != table.width || wv.rows() != table.rows() {
            return Err(Error::shape("gather_combine", wv.shape(), vv.shape()));
        }
        if table.indices.iter().any(|&j| j >= vv.rows()) {
            return Err(Error::InvalidArgument("neighbor index out of range".into()));
        }
        let mut out = Matrix::zeros(wv.rows(), vv.cols());
        for i in 0..wv.rows() {
            for (j, &n) in table.row(i).iter().enumerate() {
                let a = wv.get(i, j);
                for (o, x) in out.row_mut(i).iter_mut().zip(vv.row(n)) {
                    *o += a * x;
                }
            }
        }
        Ok(self.push(
            out,
            Op::GatherCombine {
                weights,
                value,
                table: Arc::clone(table),
            },
        ))
    }

    /// Mean squared error as a `1 × 1` value.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", p.shape(), t.shape()));
        }
        let n = p.len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Matrix::row_vector(&[loss]), Op::Mse { pred, target }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::row_vector(&[s]), Op::Sum(a))
    }

    /// Backpropagates from a scalar `root` with unit seed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self
            .nodes
            .get(root.0)
            .map(|n| n.value.shape())
            .ok_or_else(|| Error::TapeState("root is not on this tape".into()))?;
        if shape != (1, 1) {
            return Err(Error::TapeState(format!(
                "backward needs a scalar root, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.backward_with(root, Matrix::filled(1, 1, 1.0))
    }

    /// Backpropagates an arbitrary adjoint `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::TapeState("backward called on an empty tape".into()));
        }
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::TapeState("root is not on this tape".into()))?;
        if node.value.shape() != seed.shape() {
            return Err(Error::shape(
                "backward seed",
                node.value.shape(),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_nt(val(*b))?);
                accumulate(grads, *b, val(*a).matmul_tn(g)?);
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b))?);
                accumulate(grads, *b, g.matmul_tn(val(*a))?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut col_sums = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in col_sums.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *row, col_sums);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - inner);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let gain_v = val(*gain).data();
                let cols = g.cols();
                let mut dx = Matrix::zeros(g.rows(), cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dshift = Matrix::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                #[allow(clippy::needless_range_loop)]
                for r in 0..g.rows() {
                    let (gr, xh) = (g.row(r), normalized.row(r));
                    for c in 0..cols {
                        dgain.data_mut()[c] += gr[c] * xh[c];
                        dshift.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * gain_v[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dot(&dxhat, xh) / cols as f64;
                    let rstd = inv_std[r];
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = rstd * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(grads, *input, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *shift, dshift);
            }
            Op::Gelu(a) => {
                let dx = val(*a).zip_map(g, |x, gx| gx * gelu_grad(x))?;
                accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).cols();
                    let mut part = Matrix::zeros(g.rows(), width);
                    for r in 0..g.rows() {
                        part.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + width]);
                    }
                    offset += width;
                    accumulate(grads, p, part);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    accumulate(grads, p, g.slice_rows(offset, offset + rows));
                    offset += rows;
                }
            }
            Op::SliceRows { input, start } => {
                let (rows, cols) = val(*input).shape();
                let mut full = Matrix::zeros(rows, cols);
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *input, full);
            }
            Op::GatherDot { query, key, table } => {
                let (qv, kv) = (val(*query), val(*key));
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                for i in 0..qv.rows() {
                    for (j, &n) in table.row(i).iter().enumerate() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for (d, x) in dq.row_mut(i).iter_mut().zip(kv.row(n)) {
                            *d += gij * x;
                        }
                        for (d, x) in dk.row_mut(n).iter_mut().zip(qv.row(i)) {
                            *d += gij * x;
                        }
                    }
                }
                accumulate(grads, *query, dq);
                accumulate(grads, *key, dk);
            }
            Op::GatherCombine {
                weights,
                value,
                table,
            } => {
                let (wv, vv) = (val(*weights), val(*value));
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                for i in 0..wv.rows() {
                    let gi = g.row(i);
                    for (j, &n) in table.row(i).iter().enumerate() {
                        dw.set(i, j, dot(gi, vv.row(n)));
                        let a = wv.get(i, j);
                        for (d, x) in dv.row_mut(n).iter_mut().zip(gi) {
                            *d += a * x;
                        }
                    }
                }
                accumulate(grads, *weights, dw);
                accumulate(grads, *value, dv);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let k = 2.0 * g.data()[0] / p.len().max(1) as f64;
                let dp = p.zip_map(t, |a, b| k * (a - b))?;
                accumulate(grads, *target, dp.scale(-1.0));
                accumulate(grads, *pred, dp);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.data()[0]));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Value-only layer normalization.
pub fn layer_norm(x: &Matrix, gain: &[f64], shift: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols() || shift.len() != x.cols() {
        return Err(Error::shape("layer_norm", x.shape(), (1, gain.len())));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let (out, _, _) = layer_norm_forward(
        x,
        &Matrix::row_vector(gain),
        &Matrix::row_vector(shift),
        eps,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&m, None).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let m = Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_of_logs_is_proportional() {
        let m = Matrix::from_rows(&[vec![1f64.ln(), 2f64.ln(), 3f64.ln()]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_mask_and_degenerate_row() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let mask = Mask::new(2, 3, vec![true, false, true, false, false, false]).unwrap();
        match softmax_rows(&m, Some(&mask)) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row, got {other:?}"),
        }
        let mask = Mask::new(2, 3, vec![true, false, true, false, true, false]).unwrap();
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert_eq!(s.get(1, 2), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
        assert!((s.get(0, 0) + s.get(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let m = rng.normal_matrix(3, 6, 4.0);
            let allowed = (0..18).map(|i| i % 6 == 0 || rng.uniform() < 0.6).collect();
            let mask = Mask::new(3, 6, allowed).unwrap();
            let a = softmax_rows(&m, Some(&mask)).unwrap();
            let shifted = Matrix::from_vec(
                3,
                6,
                (0..18)
                    .map(|i| m.data()[i] + 10.0 * (i / 6) as f64 - 3.0)
                    .collect(),
            )
            .unwrap();
            let b = softmax_rows(&shifted, Some(&mask)).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
            for r in 0..3 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for c in 0..6 {
                    if !mask.is_allowed(r, c) {
                        assert_eq!(a.get(r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::from_rows(&[vec![2.5, 2.5, 2.5]]).unwrap();
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((y.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(8);
        let x = rng.normal_matrix(4, 7, 3.0);
        let gain: Vec<f64> = (0..7).map(|_| rng.normal(1.0)).collect();
        let shift: Vec<f64> = (0..7).map(|_| rng.normal(1.0)).collect();
        let y = layer_norm(&x, &gain, &shift, 1e-5).unwrap();
        for r in 0..4 {
            let row = x.row(r);
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= 7.0;
            let mut var = 0.0;
            for v in row {
                var += (v - mean).powi(2);
            }
            var /= 7.0;
            for c in 0..7 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt() * gain[c] + shift[c];
                assert!((y.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_on_empty_tape_is_a_state_error() {
        let tape = GradTape::new();
        assert!(matches!(
            tape.backward_with(Var(0), Matrix::zeros(1, 1)),
            Err(Error::TapeState(_))
        ));
    }

    #[test]
    fn adjoints_start_from_zero_each_pass() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Matrix::row_vector(&[3.0]));
        let y = tape.mul(x, x).unwrap();
        let first = tape.backward(y).unwrap().wrt(x);
        let second = tape.backward(y).unwrap().wrt(x);
        assert_eq!(first.data(), &[6.0]);
        assert_eq!(first, second);
    }

    #[test]
    fn gather_ops_match_dense_equivalents() {
        let mut rng = Rng::new(21);
        let q = rng.normal_matrix(4, 3, 1.0);
        let k = rng.normal_matrix(5, 3, 1.0);
        let table = Arc::new(NeighborTable {
            width: 2,
            indices: vec![1, 4, 0, 2, 3, 1, 4, 0],
        });
        let mut tape = GradTape::new();
        let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
        let s = tape.gather_dot(qv, kv, &table).unwrap();
        let dense = q.matmul_nt(&k).unwrap();
        for i in 0..4 {
            for (j, &n) in table.row(i).iter().enumerate() {
                assert!((tape.value(s).get(i, j) - dense.get(i, n)).abs() < 1e-14);
            }
        }
        let w = rng.normal_matrix(4, 2, 1.0);
        let wv = tape.leaf(w.clone());
        let out = tape.gather_combine(wv, kv, &table).unwrap();
        let mut full = Matrix::zeros(4, 5);
        for i in 0..4 {
            for (j, &n) in table.row(i).iter().enumerate() {
                full.set(i, n, w.get(i, j));
            }
        }
        assert!(tape.value(out).max_abs_diff(&full.matmul(&k).unwrap()) < 1e-14);
    }
}
