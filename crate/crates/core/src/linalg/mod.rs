//! Dense and sparse linear algebra kernels.
//!
//! Everything here is double precision and deterministic. The dense
//! eigensolver is Householder tridiagonalisation followed by implicit QL,
//! which is plenty for the few-thousand-node meshes this crate targets.

mod dense;
mod eig;
mod factor;
mod sparse;

pub use dense::DenseMatrix;
pub use eig::{generalized_sym_eig, op_norm_2, sym_eig, SymEig};
pub use factor::{solve_spd, Cholesky, Lu};
pub use sparse::{SparseMatrix, TripletBuilder};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, tolerance {tolerance:e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular to working precision (pivot {pivot} = {value:e})")]
    Singular { pivot: usize, value: f64 },
    #[error("eigensolver did not converge for {size}x{size} matrix (off-diagonal residual {residual:e})")]
    NoConvergence { size: usize, residual: f64 },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} entries, got {got}")]
    BadLength { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Euclidean norm of a slice.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
