//! Geometry-conditioned reduced finite element models built on Whitney forms.
//!
//! A mesh is turned into fine Whitney operators and intrinsic geometry
//! features; a transformer encoder conditions a learned partition of unity
//! that projects those operators to a small reduced system, and a
//! Lipschitz-bounded antisymmetric flux closes a discrete conservation law
//! which is solved by Newton's method and differentiated by the adjoint
//! method.

pub mod linalg;
pub mod mesh;
pub mod feec;
pub mod autodiff;
pub mod geofeat;
pub mod nn;
pub mod reduced;
pub mod flux;
pub mod solver;
pub mod model;
pub mod container;
pub mod data;
pub mod train;
pub mod verify;

pub use linalg::{DenseMatrix, SparseMatrix};
