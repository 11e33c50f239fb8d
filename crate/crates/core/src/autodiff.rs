//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation eagerly. Values are computed on the
//! spot; [`Tape::backward`] walks the record in reverse and accumulates
//! cotangents into every node that depends on a leaf.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{DenseMatrix, SparseMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("variable {id} does not belong to this tape")]
    ForeignVar { id: usize },
    #[error("backward seed has shape {got:?}, output has shape {expected:?}")]
    SeedShape { expected: (usize, usize), got: (usize, usize) },
    #[error("backward without seed needs a 1x1 output, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
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

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    ScaleVar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Tanh(usize),
    Exp(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Sqrt(usize),
    Recip(usize),
    MinConst(usize, f64),
    MaxConst(usize, f64),
    SoftmaxRows(usize),
    LayerNormRows { input: usize, inv_std: Vec<f64> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { input: usize, start: usize },
    SliceRows { input: usize, start: usize },
    GatherRows { input: usize, index: Vec<usize> },
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    ColSums(usize),
    MaxAll { input: usize, arg: usize },
    Congruence { w: usize, s: Arc<SparseMatrix>, st: Arc<SparseMatrix> },
    EdgeLift { w: usize, edges: Arc<Vec<(usize, usize)>> },
}

struct Node {
    op: Op,
    value: DenseMatrix,
    needs_grad: bool,
}

pub struct Tape {
    id: usize,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents produced by [`Tape::backward`].
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when untouched.
    pub fn wrt(&self, v: Var) -> DenseMatrix {
        self.get(v).cloned().unwrap_or_else(|| DenseMatrix::zeros(v.rows, v.cols))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn mismatch(op: &'static str, a: Var, b: Var) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left: a.shape(), right: b.shape() }
}

fn map_values(m: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    m.map(f)
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.borrow().len() {
            return Err(AutodiffError::ForeignVar { id: v.id });
        }
        Ok(())
    }

    fn push(&self, op: Op, value: DenseMatrix, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (rows, cols) = value.shape();
        nodes.push(Node { op, value, needs_grad });
        Var { tape: self.id, id, rows, cols }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: DenseMatrix) -> Var {
        self.push(Op::Const, value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, DenseMatrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.as_slice()[0]
    }

    fn unary(&self, a: Var, op: fn(usize) -> Op, f: impl Fn(&DenseMatrix) -> DenseMatrix) -> Result<Var> {
        self.check(a)?;
        let value = f(&self.nodes.borrow()[a.id].value);
        let needs = self.needs(&[a.id]);
        Ok(self.push(op(a.id), value, needs))
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if a.shape() != b.shape() {
            return Err(mismatch(name, a, b));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| f(*p, *q)).collect();
            DenseMatrix::new(a.rows, a.cols, data).expect("shape checked")
        };
        let needs = self.needs(&[a.id, b.id]);
        Ok(self.push(op(a.id, b.id), value, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, Op::Mul, |x, y| x * y)
    }

    fn broadcast(
        &self,
        name: &'static str,
        a: Var,
        v: Var,
        by_row: bool,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(v)?;
        let ok = if by_row { v.shape() == (1, a.cols) } else { v.shape() == (a.rows, 1) };
        if !ok {
            return Err(mismatch(name, a, v));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.id].value, nodes[v.id].value.as_slice());
            DenseMatrix::from_fn(a.rows, a.cols, |i, j| f(x[(i, j)], if by_row { r[j] } else { r[i] }))
        };
        let needs = self.needs(&[a.id, v.id]);
        Ok(self.push(op(a.id, v.id), value, needs))
    }

    /// Adds the `1×c` row `r` to every row of `a`.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        self.broadcast("add_row", a, r, true, Op::AddRow, |x, y| x + y)
    }

    /// Multiplies column `j` of `a` by `r[j]`.
    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        self.broadcast("mul_row", a, r, true, Op::MulRow, |x, y| x * y)
    }

    /// Multiplies row `i` of `a` by `c[i]`.
    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        self.broadcast("mul_col", a, c, false, Op::MulCol, |x, y| x * y)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes.borrow()[a.id].value.scale(s);
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::Scale(a.id, s), value, needs))
    }

    /// `s · a` for a `1×1` variable `s`.
    pub fn scale_var(&self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        if s.shape() != (1, 1) {
            return Err(mismatch("scale_var", a, s));
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.scale(nodes[s.id].value.as_slice()[0])
        };
        let needs = self.needs(&[a.id, s.id]);
        Ok(self.push(Op::ScaleVar(a.id, s.id), value, needs))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.rows {
            return Err(mismatch("matmul", a, b));
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul(&nodes[b.id].value).expect("shape checked")
        };
        let needs = self.needs(&[a.id, b.id]);
        Ok(self.push(Op::MatMul(a.id, b.id), value, needs))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Transpose, DenseMatrix::transpose)
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(a)?;
        if rows * cols != a.rows * a.cols {
            return Err(AutodiffError::InvalidArgument {
                op: "reshape",
                message: format!("cannot reshape {:?} to ({rows}, {cols})", a.shape()),
            });
        }
        let value = self.nodes.borrow()[a.id].value.clone().reshape(rows, cols).expect("size checked");
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::Reshape(a.id), value, needs))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, |m| map_values(m, f64::tanh))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, |m| map_values(m, f64::exp))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, |m| map_values(m, |x| 1.0 / (1.0 + (-x).exp())))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |m| map_values(m, |x| x.max(0.0)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu, |m| map_values(m, gelu))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs, |m| map_values(m, f64::abs))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt, |m| map_values(m, f64::sqrt))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Recip, |m| map_values(m, f64::recip))
    }

    /// Elementwise `min(a, c)`; ties send the gradient to `c`.
    pub fn min_const(&self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes.borrow()[a.id].value.map(|x| x.min(c));
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::MinConst(a.id, c), value, needs))
    }

    /// Elementwise `max(a, c)`; ties send the gradient to `c`.
    pub fn max_const(&self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes.borrow()[a.id].value.map(|x| x.max(c));
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::MaxConst(a.id, c), value, needs))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::SoftmaxRows, |m| {
            let mut out = m.clone();
            for i in 0..m.rows() {
                let row = out.row_mut(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            out
        })
    }

    /// Per-row standardisation `(x − mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Result<Var> {
        self.check(a)?;
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            let mut inv_std = Vec::with_capacity(a.rows);
            let n = a.cols as f64;
            for i in 0..a.rows {
                let row = out.row_mut(i);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let s = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * s;
                }
                inv_std.push(s);
            }
            (out, inv_std)
        };
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::LayerNormRows { input: a.id, inv_std }, value, needs))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            message: "no inputs".into(),
        })?;
        for &p in parts {
            self.check(p)?;
            if p.rows != first.rows {
                return Err(mismatch("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = DenseMatrix::zeros(first.rows, cols);
            for i in 0..first.rows {
                let mut off = 0;
                let dst = out.row_mut(i);
                for p in parts {
                    dst[off..off + p.cols].copy_from_slice(nodes[p.id].value.row(i));
                    off += p.cols;
                }
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Op::ConcatCols(ids), value, needs))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_rows",
            message: "no inputs".into(),
        })?;
        for &p in parts {
            self.check(p)?;
            if p.cols != first.cols {
                return Err(mismatch("concat_rows", first, p));
            }
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(rows * first.cols);
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.as_slice());
            }
            DenseMatrix::new(rows, first.cols, data).expect("sizes add up")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Op::ConcatRows(ids), value, needs))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        if start + len > a.cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                message: format!("columns {start}..{} out of {}", start + len, a.cols),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            DenseMatrix::from_fn(a.rows, len, |i, j| x[(i, start + j)])
        };
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::SliceCols { input: a.id, start }, value, needs))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        if start + len > a.rows {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                message: format!("rows {start}..{} out of {}", start + len, a.rows),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let data = x.as_slice()[start * a.cols..(start + len) * a.cols].to_vec();
            DenseMatrix::new(len, a.cols, data).expect("slice in range")
        };
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::SliceRows { input: a.id, start }, value, needs))
    }

    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        self.check(a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= a.rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                message: format!("row {bad} out of {}", a.rows),
            });
        }
        let value = self.nodes.borrow()[a.id].value.select_rows(index);
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::GatherRows { input: a.id, index: index.to_vec() }, value, needs))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sum, |m| DenseMatrix::scalar(m.sum()))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Mean, |m| DenseMatrix::scalar(m.sum() / m.len() as f64))
    }

    /// `r×1` column of row sums.
    pub fn row_sums(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::RowSums, |m| {
            DenseMatrix::column_vector(&(0..m.rows()).map(|i| m.row(i).iter().sum()).collect::<Vec<_>>())
        })
    }

    /// `1×c` row of column sums.
    pub fn col_sums(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::ColSums, |m| DenseMatrix::row_vector(&m.col_sums()))
    }

    /// Largest entry; the gradient goes to the first maximiser.
    pub fn max_all(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        if a.rows * a.cols == 0 {
            return Err(AutodiffError::InvalidArgument { op: "max_all", message: "empty input".into() });
        }
        let (value, arg) = {
            let nodes = self.nodes.borrow();
            let s = nodes[a.id].value.as_slice();
            let mut arg = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[arg] {
                    arg = i;
                }
            }
            (DenseMatrix::scalar(s[arg]), arg)
        };
        let needs = self.needs(&[a.id]);
        Ok(self.push(Op::MaxAll { input: a.id, arg }, value, needs))
    }

    /// `w · s · wᵀ` for a fixed sparse `s`.
    pub fn congruence(&self, w: Var, s: &Arc<SparseMatrix>) -> Result<Var> {
        self.check(w)?;
        if s.rows() != w.cols || s.cols() != w.cols {
            return Err(AutodiffError::ShapeMismatch { op: "congruence", left: w.shape(), right: s.shape() });
        }
        let value = s.congruence(&self.nodes.borrow()[w.id].value).expect("shape checked");
        let needs = self.needs(&[w.id]);
        Ok(self.push(Op::Congruence { w: w.id, s: s.clone(), st: Arc::new(s.transpose()) }, value, needs))
    }

    /// Induced edge map: row `(i, j)` (pairs `i < j`, lexicographic), column
    /// `e = (a, b)` holds `w[i,a] w[j,b] − w[i,b] w[j,a]`.
    pub fn edge_lift(&self, w: Var, edges: &Arc<Vec<(usize, usize)>>) -> Result<Var> {
        self.check(w)?;
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= w.cols || b >= w.cols) {
            return Err(AutodiffError::InvalidArgument {
                op: "edge_lift",
                message: format!("edge ({a}, {b}) out of range for {} fine nodes", w.cols),
            });
        }
        let value = edge_lift_value(&self.nodes.borrow()[w.id].value, edges);
        let needs = self.needs(&[w.id]);
        Ok(self.push(Op::EdgeLift { w: w.id, edges: edges.clone() }, value, needs))
    }

    /// Reverse pass from a `1×1` output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.shape() != (1, 1) {
            return Err(AutodiffError::NotScalar { shape: output.shape() });
        }
        self.backward_with_seed(output, &DenseMatrix::scalar(1.0))
    }

    /// Reverse pass from `output` with cotangent `seed`.
    pub fn backward_with_seed(&self, output: Var, seed: &DenseMatrix) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != output.shape() {
            return Err(AutodiffError::SeedShape { expected: output.shape(), got: seed.shape() });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<DenseMatrix>> = (0..=output.id).map(|_| None).collect();
        if nodes[output.id].needs_grad {
            grads[output.id] = Some(seed.clone());
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

pub(crate) fn edge_lift_value(w: &DenseMatrix, edges: &[(usize, usize)]) -> DenseMatrix {
    let p = w.rows();
    let mut out = DenseMatrix::zeros(p * (p - 1) / 2, edges.len());
    let mut r = 0;
    for i in 0..p {
        for j in i + 1..p {
            let (wi, wj) = (w.row(i), w.row(j));
            let dst = out.row_mut(r);
            for (e, &(a, b)) in edges.iter().enumerate() {
                dst[e] = wi[a] * wj[b] - wi[b] * wj[a];
            }
            r += 1;
        }
    }
    out
}

fn accumulate(nodes: &[Node], grads: &mut [Option<DenseMatrix>], id: usize, g: DenseMatrix) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes match"),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| f(*x, *y)).collect();
    DenseMatrix::new(a.rows(), a.cols(), data).expect("same shape")
}

fn propagate(nodes: &[Node], id: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
    let y = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, zip_map(g, val(*b), |p, q| p * q));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, zip_map(g, val(*a), |p, q| p * q));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*r].needs_grad {
                accumulate(nodes, grads, *r, DenseMatrix::row_vector(&g.col_sums()));
            }
        }
        Op::MulRow(a, r) => {
            let rv = val(*r).as_slice();
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * rv[j]));
            }
            if nodes[*r].needs_grad {
                let x = val(*a);
                let mut acc = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (j, s) in acc.iter_mut().enumerate() {
                        *s += g[(i, j)] * x[(i, j)];
                    }
                }
                accumulate(nodes, grads, *r, DenseMatrix::row_vector(&acc));
            }
        }
        Op::MulCol(a, c) => {
            let cv = val(*c).as_slice();
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * cv[i]));
            }
            if nodes[*c].needs_grad {
                let x = val(*a);
                let acc: Vec<f64> = (0..g.rows())
                    .map(|i| g.row(i).iter().zip(x.row(i)).map(|(p, q)| p * q).sum())
                    .collect();
                accumulate(nodes, grads, *c, DenseMatrix::column_vector(&acc));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s)),
        Op::ScaleVar(a, s) => {
            let sv = val(*s).as_slice()[0];
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.scale(sv));
            }
            if nodes[*s].needs_grad {
                let d: f64 = g.as_slice().iter().zip(val(*a).as_slice()).map(|(p, q)| p * q).sum();
                accumulate(nodes, grads, *s, DenseMatrix::scalar(d));
            }
        }
        Op::MatMul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.matmul_tr(val(*b)).expect("shapes from forward"));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, val(*a).tr_matmul(g).expect("shapes from forward"));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Reshape(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, g.clone().reshape(r, c).expect("size from forward"));
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, zip_map(g, y, |p, t| p * (1.0 - t * t))),
        Op::Exp(a) => accumulate(nodes, grads, *a, zip_map(g, y, |p, e| p * e)),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, zip_map(g, y, |p, s| p * s * (1.0 - s))),
        Op::Relu(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |p, x| if x > 0.0 { p } else { 0.0 })),
        Op::Gelu(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |p, x| p * gelu_grad(x))),
        Op::Abs(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |p, x| p * x.signum() * (x != 0.0) as u8 as f64)),
        Op::Sqrt(a) => accumulate(nodes, grads, *a, zip_map(g, y, |p, s| 0.5 * p / s)),
        Op::Recip(a) => accumulate(nodes, grads, *a, zip_map(g, y, |p, r| -p * r * r)),
        Op::MinConst(a, c) => {
            accumulate(nodes, grads, *a, zip_map(g, val(*a), |p, x| if x < *c { p } else { 0.0 }))
        }
        Op::MaxConst(a, c) => {
            accumulate(nodes, grads, *a, zip_map(g, val(*a), |p, x| if x > *c { p } else { 0.0 }))
        }
        Op::SoftmaxRows(a) => {
            let mut out = DenseMatrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let (gr, yr) = (g.row(i), y.row(i));
                let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                for (o, (p, q)) in out.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                    *o = q * (p - dot);
                }
            }
            accumulate(nodes, grads, *a, out);
        }
        Op::LayerNormRows { input, inv_std } => {
            let n = g.cols() as f64;
            let mut out = DenseMatrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let (gr, xh) = (g.row(i), y.row(i));
                let mean_g = gr.iter().sum::<f64>() / n;
                let mean_gx = gr.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() / n;
                for (o, (p, q)) in out.row_mut(i).iter_mut().zip(gr.iter().zip(xh)) {
                    *o = inv_std[i] * (p - mean_g - q * mean_gx);
                }
            }
            accumulate(nodes, grads, *input, out);
        }
        Op::ConcatCols(ids) => {
            let mut off = 0;
            for &p in ids {
                let c = nodes[p].value.cols();
                if nodes[p].needs_grad {
                    accumulate(nodes, grads, p, DenseMatrix::from_fn(g.rows(), c, |i, j| g[(i, off + j)]));
                }
                off += c;
            }
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &p in ids {
                let (r, c) = nodes[p].value.shape();
                if nodes[p].needs_grad {
                    let data = g.as_slice()[off * c..(off + r) * c].to_vec();
                    accumulate(nodes, grads, p, DenseMatrix::new(r, c, data).expect("slice"));
                }
                off += r;
            }
        }
        Op::SliceCols { input, start } => {
            let (r, c) = val(*input).shape();
            let mut out = DenseMatrix::zeros(r, c);
            for i in 0..r {
                out.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
            }
            accumulate(nodes, grads, *input, out);
        }
        Op::SliceRows { input, start } => {
            let (r, c) = val(*input).shape();
            let mut out = DenseMatrix::zeros(r, c);
            out.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
            accumulate(nodes, grads, *input, out);
        }
        Op::GatherRows { input, index } => {
            let (r, c) = val(*input).shape();
            let mut out = DenseMatrix::zeros(r, c);
            for (k, &i) in index.iter().enumerate() {
                for (o, &v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *input, out);
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, DenseMatrix::filled(r, c, g.as_slice()[0]));
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, DenseMatrix::filled(r, c, g.as_slice()[0] / (r * c) as f64));
        }
        Op::RowSums(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, DenseMatrix::from_fn(r, c, |i, _| g.as_slice()[i]));
        }
        Op::ColSums(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, DenseMatrix::from_fn(r, c, |_, j| g.as_slice()[j]));
        }
        Op::MaxAll { input, arg } => {
            let (r, c) = val(*input).shape();
            let mut out = DenseMatrix::zeros(r, c);
            out.as_mut_slice()[*arg] = g.as_slice()[0];
            accumulate(nodes, grads, *input, out);
        }
        Op::Congruence { w, s, st } => {
            // d(W S Wᵀ) = G W Sᵀ + Gᵀ W S
            let wv = val(*w);
            let ws = s.left_mul_dense(wv).expect("shapes from forward");
            let wst = st.left_mul_dense(wv).expect("shapes from forward");
            let mut out = g.matmul(&wst).expect("shapes from forward");
            out.add_assign(&g.tr_matmul(&ws).expect("shapes from forward")).expect("same shape");
            accumulate(nodes, grads, *w, out);
        }
        Op::EdgeLift { w, edges } => {
            let wv = val(*w);
            let p = wv.rows();
            let mut out = DenseMatrix::zeros(p, wv.cols());
            let mut r = 0;
            for i in 0..p {
                for j in i + 1..p {
                    let gr = g.row(r);
                    for (e, &(a, b)) in edges.iter().enumerate() {
                        let ge = gr[e];
                        if ge == 0.0 {
                            continue;
                        }
                        let (wia, wib, wja, wjb) = (wv[(i, a)], wv[(i, b)], wv[(j, a)], wv[(j, b)]);
                        out[(i, a)] += ge * wjb;
                        out[(j, b)] += ge * wia;
                        out[(i, b)] -= ge * wja;
                        out[(j, a)] -= ge * wib;
                    }
                    r += 1;
                }
            }
            accumulate(nodes, grads, *w, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` (scalar output) at `x0`.
    fn fd_check(label: &str, x0: &DenseMatrix, f: impl Fn(&Tape, Var) -> Var, tol: f64) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = f(&tape, x);
        let grad = tape.backward(out).unwrap().wrt(x);
        let eval = |m: DenseMatrix| {
            let t = Tape::new();
            let v = t.leaf(m);
            let o = f(&t, v);
            t.scalar_value(o)
        };
        for k in 0..x0.len() {
            let h = 1e-5;
            let mut plus = x0.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = x0.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = grad.as_slice()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err <= tol, "{label} entry {k}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x), DenseMatrix::filled(2, 3, 1.0));
    }

    #[test]
    fn quadratic_form_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(4, 4, &mut rng);
        let x0 = random(4, 1, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let am = tape.constant(a.clone());
        let ax = tape.matmul(am, x).unwrap();
        let xt = tape.transpose(x).unwrap();
        let q = tape.matmul(xt, ax).unwrap();
        let g = tape.backward(q).unwrap().wrt(x);
        let expect = a.add(&a.transpose()).unwrap().matmul(&x0).unwrap();
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random(3, 5, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let s = tape.softmax_rows(x).unwrap();
        for i in 0..3 {
            assert!((tape.value(s).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let w = random(3, 5, &mut rng);
        fd_check(
            "softmax",
            &x0,
            |t, x| {
                let s = t.softmax_rows(x).unwrap();
                let c = t.constant(w.clone());
                let p = t.mul(s, c).unwrap();
                t.sum(p).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn identity_seed_passes_through() {
        let tape = Tape::new();
        let x = tape.leaf(DenseMatrix::zeros(2, 2));
        let y = tape.scale(x, 1.0).unwrap();
        let seed = DenseMatrix::from_fn(2, 2, |i, j| (3 * i + j) as f64);
        assert_eq!(tape.backward_with_seed(y, &seed).unwrap().wrt(x), seed);
    }

    #[test]
    fn tanh_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(3, 4, &mut rng);
        let x0 = random(4, 1, &mut rng);
        fd_check(
            "tanh",
            &w,
            |t, wv| {
                let x = t.constant(x0.clone());
                let y = t.matmul(wv, x).unwrap();
                let y = t.tanh(y).unwrap();
                t.sum(y).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let x = tape.leaf(random(3, 3, &mut rng));
        let y = tape.tanh(x).unwrap();
        let y = tape.matmul(y, x).unwrap();
        let (s1, s2) = (random(3, 3, &mut rng), random(3, 3, &mut rng));
        let g1 = tape.backward_with_seed(y, &s1).unwrap().wrt(x);
        let g2 = tape.backward_with_seed(y, &s2).unwrap().wrt(x);
        let g12 = tape.backward_with_seed(y, &s1.add(&s2).unwrap()).unwrap().wrt(x);
        assert!(g12.max_abs_diff(&g1.add(&g2).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn errors_are_reported() {
        let tape = Tape::new();
        let a = tape.leaf(DenseMatrix::zeros(2, 3));
        let b = tape.leaf(DenseMatrix::zeros(2, 3));
        assert_eq!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", left: (2, 3), right: (2, 3) })
        );
        assert!(matches!(tape.backward(a), Err(AutodiffError::NotScalar { .. })));
        assert!(matches!(
            tape.backward_with_seed(a, &DenseMatrix::zeros(3, 2)),
            Err(AutodiffError::SeedShape { .. })
        ));
        let other = Tape::new();
        let c = other.leaf(DenseMatrix::zeros(1, 1));
        assert!(matches!(tape.backward(c), Err(AutodiffError::ForeignVar { .. })));
    }

    #[test]
    fn untouched_leaves_get_zero() {
        let tape = Tape::new();
        let a = tape.leaf(DenseMatrix::scalar(2.0));
        let b = tape.leaf(DenseMatrix::scalar(5.0));
        let y = tape.exp(a).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b), DenseMatrix::scalar(0.0));
    }

    #[test]
    fn every_primitive_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(4, 3, &mut rng);
        let r = random(1, 3, &mut rng);
        let c = random(4, 1, &mut rng);
        let w = random(4, 3, &mut rng);
        type Build = Box<dyn Fn(&Tape, Var) -> Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("gelu", Box::new(|t, x| t.gelu(x).unwrap())),
            ("sigmoid", Box::new(|t, x| t.sigmoid(x).unwrap())),
            ("exp", Box::new(|t, x| t.exp(x).unwrap())),
            ("layer_norm", Box::new(|t, x| t.layer_norm_rows(x, 1e-5).unwrap())),
            ("abs", Box::new(|t, x| t.abs(x).unwrap())),
            ("relu", Box::new(|t, x| t.relu(x).unwrap())),
            ("recip", Box::new(|t, x| {
                let y = t.exp(x).unwrap();
                t.recip(y).unwrap()
            })),
            ("sqrt", Box::new(|t, x| {
                let y = t.exp(x).unwrap();
                t.sqrt(y).unwrap()
            })),
            ("min_max", Box::new(|t, x| {
                let y = t.min_const(x, 0.3).unwrap();
                t.max_const(y, -0.4).unwrap()
            })),
            ("add_row", Box::new(move |t, x| {
                let rv = t.leaf(r.clone());
                let y = t.add_row(x, rv).unwrap();
                t.mul_row(y, rv).unwrap()
            })),
            ("mul_col", Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                t.mul_col(x, cv).unwrap()
            })),
            ("slice_concat", Box::new(|t, x| {
                let a = t.slice_cols(x, 1, 2).unwrap();
                let b = t.slice_rows(x, 1, 3).unwrap();
                let bt = t.transpose(b).unwrap();
                let top = t.concat_cols(&[a, x]).unwrap();
                let g = t.gather_rows(top, &[3, 0, 0]).unwrap();
                let g = t.slice_cols(g, 0, 3).unwrap();
                t.concat_rows(&[g, bt]).unwrap()
            })),
            ("reshape", Box::new(|t, x| {
                let y = t.reshape(x, 2, 6).unwrap();
                t.tanh(y).unwrap()
            })),
            ("reductions", Box::new(|t, x| {
                let rs = t.row_sums(x).unwrap();
                let cs = t.col_sums(x).unwrap();
                let m = t.mean(x).unwrap();
                let mx = t.max_all(x).unwrap();
                let rs = t.matmul(rs, cs).unwrap();
                let rs = t.scale_var(rs, m).unwrap();
                t.scale_var(rs, mx).unwrap()
            })),
        ];
        for (name, build) in &cases {
            let wc = w.clone();
            fd_check(
                name,
                &x0,
                |t, x| {
                    let y = build(t, x);
                    let (rows, cols) = y.shape();
                    let weights = t.constant(DenseMatrix::from_fn(rows, cols, |i, j| {
                        wc[(i % wc.rows(), j % wc.cols())]
                    }));
                    let p = t.mul(y, weights).unwrap();
                    t.sum(p).unwrap()
                },
                1e-6,
            );
        }
    }

    #[test]
    fn sparse_congruence_and_edge_lift_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = DenseMatrix::from_fn(5, 5, |i, j| if (i + 2 * j) % 3 == 0 { rng.random_range(-1.0..1.0) } else { 0.0 });
        let s = Arc::new(SparseMatrix::from_dense(&s));
        let w0 = random(3, 5, &mut rng);
        let weights = random(3, 3, &mut rng);
        fd_check(
            "congruence",
            &w0,
            |t, w| {
                let y = t.congruence(w, &s).unwrap();
                let c = t.constant(weights.clone());
                let p = t.mul(y, c).unwrap();
                t.sum(p).unwrap()
            },
            1e-6,
        );
        let edges = Arc::new(vec![(0, 1), (0, 2), (1, 4), (2, 3), (3, 4)]);
        let lw = random(3, 5, &mut rng);
        fd_check(
            "edge_lift",
            &w0,
            |t, w| {
                let y = t.edge_lift(w, &edges).unwrap();
                let c = t.constant(lw.clone());
                let p = t.mul(y, c).unwrap();
                t.sum(p).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn repeated_tapes_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random(5, 4, &mut rng);
        let run = || {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = t.softmax_rows(x).unwrap();
            let y = t.matmul(y, t.transpose(x).unwrap()).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap().wrt(x)
        };
        assert_eq!(run().as_slice(), run().as_slice());
    }
}
