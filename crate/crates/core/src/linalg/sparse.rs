use serde::{Deserialize, Serialize};

use super::{DenseMatrix, LinalgError, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` triplets; duplicates are summed on build.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> SparseMatrix {
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0; self.rows + 1];
        let mut col_indices = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("entry present") += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        SparseMatrix { rows: self.rows, cols: self.cols, row_offsets, col_indices, values }
    }
}

impl SparseMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_offsets[i], self.row_offsets[i + 1]);
        self.col_indices[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.row_offsets[i], self.row_offsets[i + 1]);
        match self.col_indices[s..e].binary_search(&j) {
            Ok(p) => self.values[s + p],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }

    pub fn from_dense(d: &DenseMatrix) -> Self {
        let mut b = TripletBuilder::new(d.rows(), d.cols());
        for i in 0..d.rows() {
            for j in 0..d.cols() {
                if d[(i, j)] != 0.0 {
                    b.push(i, j, d[(i, j)]);
                }
            }
        }
        b.build()
    }

    pub fn transpose(&self) -> Self {
        let mut b = TripletBuilder::new(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                b.push(j, i, v);
            }
        }
        b.build()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "sparse_matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect())
    }

    /// `self · b` for dense `b`.
    pub fn mul_dense(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "sparse_mul_dense",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let m = b.cols();
        let mut out = DenseMatrix::zeros(self.rows, m);
        for i in 0..self.rows {
            for (k, v) in self.row(i) {
                let src = b.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `a · self` for dense `a`.
    pub fn left_mul_dense(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        if a.cols() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "dense_mul_sparse",
                left: a.shape(),
                right: self.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(a.rows(), self.cols);
        for r in 0..a.rows() {
            let arow = a.row(r).to_vec();
            let orow = out.row_mut(r);
            for (k, &akv) in arow.iter().enumerate() {
                if akv == 0.0 {
                    continue;
                }
                for (j, v) in self.row(k) {
                    orow[j] += akv * v;
                }
            }
        }
        Ok(out)
    }

    /// `a · self · aᵀ`, the congruence used to project fine operators.
    pub fn congruence(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        let as_ = self.left_mul_dense(a)?;
        as_.matmul_tr(a)
    }

    pub fn max_abs_diff_dense(&self, d: &DenseMatrix) -> Result<f64> {
        self.to_dense().max_abs_diff(d)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Sub-block with the given row and column index lists.
    pub fn submatrix_dense(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        let mut col_pos = vec![usize::MAX; self.cols];
        for (p, &c) in cols.iter().enumerate() {
            col_pos[c] = p;
        }
        let mut out = DenseMatrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                let p = col_pos[j];
                if p != usize::MAX {
                    out[(r, p)] = v;
                }
            }
        }
        out
    }
}
