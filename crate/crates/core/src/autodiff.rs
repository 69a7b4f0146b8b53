//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every node created during a forward pass. Nodes are
//! appended in creation order, which is already a topological order, so
//! `backward` is a single reverse sweep. [`Tensor`] is a lightweight handle
//! into the graph; values and gradients are read back through the graph.
//!
//! Stop-gradient is [`Graph::detach`]: it copies the values into a fresh leaf
//! with `requires_grad = false` and no link to its source.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::matrix::Matrix;

/// Rows whose Euclidean norm is at or below this value cannot be normalised.
pub const NORM_FLOOR: f64 = 1e-12;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("batchnorm needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("l2_normalize: row {row} has norm {norm:e}, at or below the floor {NORM_FLOOR:e}")]
    NearZeroNorm { row: usize, norm: f64 },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward already ran on this graph; reset it before reuse")]
    GraphConsumed,
    #[error("tensor belongs to a different or reset graph")]
    ForeignTensor,
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cannot reduce an empty list of tensors")]
    EmptyReduction,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    generation: u64,
    index: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Elementwise operations accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: usize,
        inv_norm: Vec<f64>,
    },
    RowDot(usize, usize),
    Row(usize, usize),
    Sum(usize),
    MeanScalars(Vec<usize>),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Arena of nodes for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    generation: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            generation: fresh_generation(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every node and starts a new generation. Handles from before the
    /// reset are rejected afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.generation = fresh_generation();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, t: Tensor) -> Result<&Node> {
        if t.generation != self.generation {
            return Err(AutodiffError::ForeignTensor);
        }
        self.nodes.get(t.index).ok_or(AutodiffError::ForeignTensor)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let (rows, cols) = value.shape();
        let index = self.nodes.len();
        self.nodes.push(Node {
            grad: Matrix::zeros(rows, cols),
            value,
            op,
            requires_grad,
        });
        Tensor {
            generation: self.generation,
            index,
            rows,
            cols,
        }
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> Result<&Matrix> {
        Ok(&self.node(t)?.value)
    }

    pub fn grad(&self, t: Tensor) -> Result<&Matrix> {
        Ok(&self.node(t)?.grad)
    }

    pub fn requires_grad(&self, t: Tensor) -> Result<bool> {
        Ok(self.node(t)?.requires_grad)
    }

    /// True when the tensor has a backward record (it is not a leaf).
    pub fn has_node(&self, t: Tensor) -> Result<bool> {
        Ok(!matches!(self.node(t)?.op, Op::Leaf))
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn scalar(&self, t: Tensor) -> Result<f64> {
        let v = self.value(t)?;
        if v.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.data()[0])
    }

    /// Stop-gradient: a new leaf with the same values and no backward linkage.
    pub fn detach(&mut self, x: Tensor) -> Result<Tensor> {
        let value = self.node(x)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.cols() != nb.value.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let value = na.value.matmul(&nb.value);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, Op::MatMul(a.index, b.index), rg))
    }

    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: Tensor,
        b: Option<Tensor>,
    ) -> Result<Tensor> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Scale(c), None) => self.scale(a, c),
            (_, Some(b)) => Err(AutodiffError::ShapeMismatch {
                op: "elementwise (unary op given two operands)",
                left: a.shape(),
                right: b.shape(),
            }),
            (_, None) => Err(AutodiffError::ShapeMismatch {
                op: "elementwise (binary op given one operand)",
                left: a.shape(),
                right: (0, 0),
            }),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: a.shape(),
                right: b.shape(),
            });
        }
        let data = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Matrix::from_vec(a.rows, a.cols, data).expect("shape checked");
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.index, b.index))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let na = self.node(a)?;
        let value = na.value.map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = na.requires_grad;
        Ok(self.push(value, Op::Relu(a.index), rg))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let na = self.node(a)?;
        let value = na.value.map(|v| c * v);
        let rg = na.requires_grad;
        Ok(self.push(value, Op::Scale(a.index, c), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` tensor.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (na, nr) = (self.node(a)?, self.node(row)?);
        if nr.value.rows() != 1 || nr.value.cols() != na.value.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: a.shape(),
                right: row.shape(),
            });
        }
        let mut value = na.value.clone();
        let bias = nr.value.data();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        let rg = na.requires_grad || nr.requires_grad;
        Ok(self.push(value, Op::AddRow(a.index, row.index), rg))
    }

    /// Training-mode batch normalisation over the rows of `x`, using the biased
    /// batch variance, followed by the per-column affine map `gamma`, `beta`.
    pub fn batchnorm(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (nx, ng, nb) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let (rows, cols) = nx.value.shape();
        for (t, n) in [(gamma, ng), (beta, nb)] {
            if n.value.shape() != (1, cols) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "batchnorm",
                    left: x.shape(),
                    right: t.shape(),
                });
            }
        }
        if rows < 2 {
            return Err(AutodiffError::DegenerateBatch { rows });
        }
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        for row in nx.value.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for row in nx.value.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();

        let mut normalized = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let (g, b) = (ng.value.data(), nb.value.data());
        for r in 0..rows {
            let xr = nx.value.row(r);
            for c in 0..cols {
                let xhat = (xr[c] - mean[c]) * inv_std[c];
                normalized.set(r, c, xhat);
                value.set(r, c, g[c] * xhat + b[c]);
            }
        }
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Tensor) -> Result<Tensor> {
        let nx = self.node(x)?;
        let mut value = nx.value.clone();
        let mut inv_norm = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = crate::matrix::l2_norm(row);
            if norm.is_nan() || norm <= NORM_FLOOR {
                return Err(AutodiffError::NearZeroNorm { row: r, norm });
            }
            let inv = 1.0 / norm;
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
        let rg = nx.requires_grad;
        Ok(self.push(
            value,
            Op::L2Normalize {
                x: x.index,
                inv_norm,
            },
            rg,
        ))
    }

    /// Row-wise inner product of two `m x n` tensors, giving `m x 1`.
    pub fn row_dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_dot",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let data = na
            .value
            .iter_rows()
            .zip(nb.value.iter_rows())
            .map(|(x, y)| crate::matrix::dot(x, y))
            .collect();
        let value = Matrix::from_vec(a.rows, 1, data).expect("one value per row");
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, Op::RowDot(a.index, b.index), rg))
    }

    /// Extracts row `index` as a `1 x n` tensor.
    pub fn row(&mut self, a: Tensor, index: usize) -> Result<Tensor> {
        let na = self.node(a)?;
        if index >= na.value.rows() {
            return Err(AutodiffError::RowOutOfRange {
                index,
                rows: na.value.rows(),
            });
        }
        let value = Matrix::row_vector(na.value.row(index));
        let rg = na.requires_grad;
        Ok(self.push(value, Op::Row(a.index, index), rg))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let na = self.node(a)?;
        let value = Matrix::filled(1, 1, na.value.sum());
        let rg = na.requires_grad;
        Ok(self.push(value, Op::Sum(a.index), rg))
    }

    /// Mean of `1 x 1` tensors. The forward sum runs over the values in
    /// ascending order, so the result does not depend on the order of `items`.
    pub fn mean_scalars(&mut self, items: &[Tensor]) -> Result<Tensor> {
        if items.is_empty() {
            return Err(AutodiffError::EmptyReduction);
        }
        let mut values = Vec::with_capacity(items.len());
        let mut rg = false;
        for &t in items {
            let n = self.node(t)?;
            if n.value.shape() != (1, 1) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "mean_scalars",
                    left: t.shape(),
                    right: (1, 1),
                });
            }
            values.push(n.value.data()[0]);
            rg |= n.requires_grad;
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let parents = items.iter().map(|t| t.index).collect();
        Ok(self.push(Matrix::filled(1, 1, mean), Op::MeanScalars(parents), rg))
    }

    /// Mean softmax cross-entropy of `logits` (`m x classes`) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let nl = self.node(logits)?;
        let (rows, classes) = nl.value.shape();
        if labels.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: logits.shape(),
                right: (labels.len(), 1),
            });
        }
        if rows == 0 {
            return Err(AutodiffError::EmptyReduction);
        }
        let mut probs = Matrix::zeros(rows, classes);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(AutodiffError::LabelOutOfRange { label, classes });
            }
            let row = nl.value.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            loss += denom.ln() - (row[label] - max);
        }
        let rg = nl.requires_grad;
        Ok(self.push(
            Matrix::filled(1, 1, loss / rows as f64),
            Op::SoftmaxCrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable node that requires grad; the graph is consumed afterwards.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        self.node(loss)?;
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        if loss.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss {
                rows: loss.rows,
                cols: loss.cols,
            });
        }
        self.consumed = true;
        self.nodes[loss.index].grad.data_mut()[0] = 1.0;

        let mut reachable = vec![false; loss.index + 1];
        reachable[loss.index] = true;
        for i in (0..=loss.index).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            // Parents always have a lower index, so split the arena there.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(node, before, &mut reachable);
        }
        Ok(())
    }
}

fn accumulate(
    nodes: &mut [Node],
    reachable: &mut [bool],
    index: usize,
    f: impl FnOnce(&mut Matrix, &Matrix),
) {
    let node = &mut nodes[index];
    if node.requires_grad {
        f(&mut node.grad, &node.value);
        reachable[index] = true;
    }
}

fn propagate(node: &Node, nodes: &mut [Node], reachable: &mut [bool]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                let ga = g.matmul_t(&nodes[b].value);
                accumulate(nodes, reachable, a, |grad, _| grad.axpy(1.0, &ga));
            }
            if nodes[b].requires_grad {
                let gb = nodes[a].value.tmatmul(g);
                accumulate(nodes, reachable, b, |grad, _| grad.axpy(1.0, &gb));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, reachable, *a, |grad, _| grad.axpy(1.0, g));
            accumulate(nodes, reachable, *b, |grad, _| grad.axpy(1.0, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, reachable, *a, |grad, _| grad.axpy(1.0, g));
            accumulate(nodes, reachable, *b, |grad, _| grad.axpy(-1.0, g));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let va = nodes[a].value.clone();
            let vb = nodes[b].value.clone();
            accumulate(nodes, reachable, a, |grad, _| {
                for ((d, gi), y) in grad.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *d += gi * y;
                }
            });
            accumulate(nodes, reachable, b, |grad, _| {
                for ((d, gi), x) in grad.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *d += gi * x;
                }
            });
        }
        Op::Relu(a) => accumulate(nodes, reachable, *a, |grad, input| {
            for ((d, gi), x) in grad.data_mut().iter_mut().zip(g.data()).zip(input.data()) {
                if *x > 0.0 {
                    *d += gi;
                }
            }
        }),
        Op::Scale(a, c) => accumulate(nodes, reachable, *a, |grad, _| grad.axpy(*c, g)),
        Op::AddRow(a, row) => {
            accumulate(nodes, reachable, *a, |grad, _| grad.axpy(1.0, g));
            accumulate(nodes, reachable, *row, |grad, _| {
                let d = grad.data_mut();
                for r in g.iter_rows() {
                    for (di, gi) in d.iter_mut().zip(r) {
                        *di += gi;
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let (rows, cols) = g.shape();
            let n = rows as f64;
            let gamma_v = nodes[*gamma].value.data().to_vec();
            let mut sum_g = vec![0.0; cols];
            let mut sum_g_xhat = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let gi = g.get(r, c);
                    sum_g[c] += gi;
                    sum_g_xhat[c] += gi * normalized.get(r, c);
                }
            }
            accumulate(nodes, reachable, *beta, |grad, _| {
                for (d, s) in grad.data_mut().iter_mut().zip(&sum_g) {
                    *d += s;
                }
            });
            accumulate(nodes, reachable, *gamma, |grad, _| {
                for (d, s) in grad.data_mut().iter_mut().zip(&sum_g_xhat) {
                    *d += s;
                }
            });
            // With dxhat = g * gamma:
            // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            accumulate(nodes, reachable, *x, |grad, _| {
                for r in 0..rows {
                    for c in 0..cols {
                        let k = gamma_v[c] * inv_std[c] / n;
                        let dx =
                            k * (n * g.get(r, c) - sum_g[c] - normalized.get(r, c) * sum_g_xhat[c]);
                        grad.data_mut()[r * cols + c] += dx;
                    }
                }
            });
        }
        Op::L2Normalize { x, inv_norm } => {
            let y = &node.value;
            accumulate(nodes, reachable, *x, |grad, _| {
                for (r, inv) in inv_norm.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj = crate::matrix::dot(gr, yr);
                    for ((d, gi), yi) in grad.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += (gi - yi * proj) * inv;
                    }
                }
            });
        }
        Op::RowDot(a, b) => {
            let (a, b) = (*a, *b);
            let va = nodes[a].value.clone();
            let vb = nodes[b].value.clone();
            let row_scaled = |grad: &mut Matrix, other: &Matrix| {
                for r in 0..other.rows() {
                    let gr = g.data()[r];
                    for (d, o) in grad.row_mut(r).iter_mut().zip(other.row(r)) {
                        *d += gr * o;
                    }
                }
            };
            accumulate(nodes, reachable, a, |grad, _| row_scaled(grad, &vb));
            accumulate(nodes, reachable, b, |grad, _| row_scaled(grad, &va));
        }
        Op::Row(a, index) => accumulate(nodes, reachable, *a, |grad, _| {
            for (d, gi) in grad.row_mut(*index).iter_mut().zip(g.data()) {
                *d += gi;
            }
        }),
        Op::Sum(a) => {
            let gi = g.data()[0];
            accumulate(nodes, reachable, *a, |grad, _| {
                grad.data_mut().iter_mut().for_each(|d| *d += gi)
            });
        }
        Op::MeanScalars(parents) => {
            let share = g.data()[0] / parents.len() as f64;
            for &p in parents {
                accumulate(nodes, reachable, p, |grad, _| grad.data_mut()[0] += share);
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let scale = g.data()[0] / labels.len() as f64;
            accumulate(nodes, reachable, *logits, |grad, _| {
                for (r, &label) in labels.iter().enumerate() {
                    for (c, (d, p)) in grad.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                        let target = if c == label { 1.0 } else { 0.0 };
                        *d += scale * (p - target);
                    }
                }
            });
        }
    }
}
