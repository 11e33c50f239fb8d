//! Reduced Whitney spaces spanned by a partition of unity.
//!
//! A column-stochastic `W` (partitions × fine nodes) defines reduced nodal
//! functions `ψ_i = Σ_j W_ij φ_j`. Fine operators project as `M0 = W M0′ Wᵀ`,
//! `M1 = W1 M1′ W1ᵀ` with the induced edge map `W1`, and the reduced incidence
//! is that of the complete graph on the partitions.
//!
//! Partition order: learned partitions first, then for every Dirichlet
//! sideset (name order) its data partitions followed by one complementary
//! partition. Only the learned partitions carry unknowns.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{self, Tape, Var};
use crate::feec::FineOperators;
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReducedError {
    #[error("sideset `{0}` does not exist")]
    UnknownSideset(String),
    #[error("sideset `{name}` has {expected} nodes but {got} boundary values were given")]
    BoundaryLength { name: String, expected: usize, got: usize },
    #[error("boundary value on sideset `{name}` is not finite")]
    NonFiniteBoundary { name: String },
    #[error("partition matrix has {got} columns, fine space has {expected} nodes")]
    SizeMismatch { expected: usize, got: usize },
    #[error("column {node} of the partition matrix sums to {sum}")]
    NotStochastic { node: usize, sum: f64 },
    #[error("partition matrix has negative entry {value} at ({row}, {col})")]
    Negative { row: usize, col: usize, value: f64 },
    #[error("{0}")]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, ReducedError>;

/// Fixed partitions reproducing Dirichlet data on one sideset.
///
/// Each data partition `ψ` is supported on the sideset with coefficient `s`;
/// `rest = 1 − Σψ` on the sideset with coefficient 0. Nonnegative data gives
/// one data partition `u_b / s` with `s = Σ u_b`; data of both signs is split
/// as `u_b = u⁺ − u⁻` into two data partitions sharing `rest`; identically
/// zero data uses the uniform partition with coefficient 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletGroup {
    pub sideset: String,
    pub nodes: Vec<usize>,
    /// `(values on nodes, coefficient)` per data partition.
    pub data: Vec<(Vec<f64>, f64)>,
    pub rest: Vec<f64>,
}

pub fn dirichlet_partitions(mesh: &Mesh, sideset: &str, u_b: &[f64]) -> Result<DirichletGroup> {
    let set = mesh.sideset(sideset).ok_or_else(|| ReducedError::UnknownSideset(sideset.to_string()))?;
    let m = set.nodes.len();
    if u_b.len() != m {
        return Err(ReducedError::BoundaryLength { name: sideset.to_string(), expected: m, got: u_b.len() });
    }
    if u_b.iter().any(|v| !v.is_finite()) {
        return Err(ReducedError::NonFiniteBoundary { name: sideset.to_string() });
    }
    let normalised = |part: Vec<f64>| -> (Vec<f64>, f64) {
        let s: f64 = part.iter().sum();
        (part.iter().map(|v| v / s).collect(), s)
    };
    let has_pos = u_b.iter().any(|&v| v > 0.0);
    let has_neg = u_b.iter().any(|&v| v < 0.0);
    let data = match (has_pos, has_neg) {
        (false, false) => vec![(vec![1.0 / m as f64; m], 0.0)],
        (true, false) => vec![normalised(u_b.to_vec())],
        (false, true) => {
            let (psi, s) = normalised(u_b.iter().map(|v| -v).collect());
            vec![(psi, -s)]
        }
        (true, true) => {
            let (pos, sp) = normalised(u_b.iter().map(|v| v.max(0.0)).collect());
            let (neg, sn) = normalised(u_b.iter().map(|v| (-v).max(0.0)).collect());
            vec![(pos, sp), (neg, -sn)]
        }
    };
    let rest = (0..m).map(|k| 1.0 - data.iter().map(|(psi, _)| psi[k]).sum::<f64>()).collect();
    Ok(DirichletGroup { sideset: sideset.to_string(), nodes: set.nodes.clone(), data, rest })
}

/// Dirichlet values per sideset: one `|Γ| × F` matrix in sideset node order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirichletData {
    pub values: BTreeMap<String, DenseMatrix>,
}

impl DirichletData {
    pub fn n_fields(&self) -> usize {
        self.values.values().next().map_or(1, DenseMatrix::cols)
    }

    /// Constant value per sideset, single field.
    pub fn constant(mesh: &Mesh, values: &[(&str, f64)]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for &(name, v) in values {
            let set = mesh.sideset(name).ok_or_else(|| ReducedError::UnknownSideset(name.to_string()))?;
            out.insert(name.to_string(), DenseMatrix::filled(set.nodes.len(), 1, v));
        }
        Ok(Self { values: out })
    }
}

/// Fixed boundary partitions of every field, padded to a common count.
#[derive(Debug, Clone)]
pub struct BoundaryLayout {
    pub n_nodes: usize,
    /// True on nodes of a Dirichlet sideset.
    pub dirichlet: Vec<bool>,
    /// Per field: fixed partition rows (`n_fixed × N`).
    pub rows: Vec<DenseMatrix>,
    /// Per field: coefficient of each fixed partition.
    pub coefficients: Vec<Vec<f64>>,
}

impl BoundaryLayout {
    pub fn new(mesh: &Mesh, data: &DirichletData) -> Result<Self> {
        let n = mesh.n_nodes();
        let n_fields = data.n_fields();
        let mut groups: Vec<Vec<DirichletGroup>> = vec![Vec::new(); n_fields];
        for (name, vals) in &data.values {
            for (f, field_groups) in groups.iter_mut().enumerate() {
                field_groups.push(dirichlet_partitions(mesh, name, &vals.column(f))?);
            }
        }
        let n_sets = data.values.len();
        let width: Vec<usize> =
            (0..n_sets).map(|s| groups.iter().map(|g| g[s].data.len()).max().unwrap_or(1)).collect();
        let n_fixed: usize = width.iter().map(|w| w + 1).sum();
        let mut dirichlet = vec![false; n];
        let mut rows = Vec::with_capacity(n_fields);
        let mut coefficients = Vec::with_capacity(n_fields);
        for field_groups in &groups {
            let mut r = DenseMatrix::zeros(n_fixed, n);
            let mut c = Vec::with_capacity(n_fixed);
            let mut row = 0;
            for (g, &w) in field_groups.iter().zip(&width) {
                for k in 0..w {
                    if let Some((psi, s)) = g.data.get(k) {
                        for (&node, &v) in g.nodes.iter().zip(psi) {
                            r[(row, node)] = v;
                        }
                        c.push(*s);
                    } else {
                        c.push(0.0);
                    }
                    row += 1;
                }
                for (&node, &v) in g.nodes.iter().zip(&g.rest) {
                    r[(row, node)] = v;
                    dirichlet[node] = true;
                }
                c.push(0.0);
                row += 1;
            }
            rows.push(r);
            coefficients.push(c);
        }
        Ok(Self { n_nodes: n, dirichlet, rows, coefficients })
    }

    pub fn n_fixed(&self) -> usize {
        self.rows.first().map_or(0, DenseMatrix::rows)
    }

    pub fn n_fields(&self) -> usize {
        self.rows.len()
    }

    /// `N×1` column: 1 on free nodes, 0 on Dirichlet nodes.
    pub fn free_mask(&self) -> DenseMatrix {
        DenseMatrix::column_vector(&self.dirichlet.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect::<Vec<_>>())
    }
}

/// Full partition matrix of one field: softmax of `logits` (`N × P_free`)
/// over partitions, zeroed on Dirichlet nodes, stacked on the fixed rows.
pub fn partition_on_tape(tape: &Tape, logits: Var, layout: &BoundaryLayout, field: usize) -> Result<Var> {
    let soft = tape.softmax_rows(logits)?;
    let masked = tape.mul_col(soft, tape.constant(layout.free_mask()))?;
    let free = tape.transpose(masked)?;
    Ok(tape.concat_rows(&[free, tape.constant(layout.rows[field].clone())])?)
}

/// Incidence of the complete graph: row `(i, j)`, `i < j` lexicographic, is
/// −1 at `i` and +1 at `j`.
pub fn complete_graph_incidence(p: usize) -> DenseMatrix {
    let mut d = DenseMatrix::zeros(p * (p.saturating_sub(1)) / 2, p);
    let mut r = 0;
    for i in 0..p {
        for j in i + 1..p {
            d[(r, i)] = -1.0;
            d[(r, j)] = 1.0;
            r += 1;
        }
    }
    d
}

/// `(i, j)` pairs in reduced edge order.
pub fn reduced_edges(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect()
}

/// Induced edge map `W1` (`P1 × E`).
pub fn edge_lift(w: &DenseMatrix, edges: &[(usize, usize)]) -> DenseMatrix {
    autodiff::edge_lift_value(w, edges)
}

/// Fine operators shared by every partition of one mesh, ready for tapes.
#[derive(Debug, Clone)]
pub struct FineShared {
    pub m0: Arc<SparseMatrix>,
    pub m1: Arc<SparseMatrix>,
    pub k: Arc<SparseMatrix>,
    pub d0: Arc<SparseMatrix>,
    pub edges: Arc<Vec<(usize, usize)>>,
}

impl From<&FineOperators> for FineShared {
    fn from(f: &FineOperators) -> Self {
        Self {
            m0: Arc::new(f.m0.clone()),
            m1: Arc::new(f.m1.clone()),
            k: Arc::new(f.k.clone()),
            d0: Arc::new(f.d0.clone()),
            edges: Arc::new(f.edges.clone()),
        }
    }
}

/// Differentiable `(M1, K)` for a partition variable `w`.
pub fn project_on_tape(tape: &Tape, w: Var, fine: &FineShared, d0: Var) -> Result<(Var, Var)> {
    let w1 = tape.edge_lift(w, &fine.edges)?;
    let m1 = tape.congruence(w1, &fine.m1)?;
    let m1d = tape.matmul(m1, d0)?;
    let k = tape.matmul(tape.transpose(d0)?, m1d)?;
    Ok((m1, k))
}

#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub w: DenseMatrix,
    pub m0: DenseMatrix,
    pub m1: DenseMatrix,
    pub d0: DenseMatrix,
    pub k: DenseMatrix,
    pub n_free: usize,
    /// Coefficients of partitions `n_free..`.
    pub fixed: Vec<f64>,
}

impl ReducedSystem {
    pub fn p_total(&self) -> usize {
        self.w.rows()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.n_free).collect()
    }

    /// `K` restricted to learned partitions.
    pub fn k_free(&self) -> DenseMatrix {
        let idx = self.free_indices();
        self.k.submatrix(&idx, &idx)
    }
}

pub fn check_stochastic(w: &DenseMatrix, tol: f64) -> Result<()> {
    for (node, sum) in w.col_sums().into_iter().enumerate() {
        if (sum - 1.0).abs() > tol || !sum.is_finite() {
            return Err(ReducedError::NotStochastic { node, sum });
        }
    }
    for r in 0..w.rows() {
        for (c, &v) in w.row(r).iter().enumerate() {
            if v < 0.0 {
                return Err(ReducedError::Negative { row: r, col: c, value: v });
            }
        }
    }
    Ok(())
}

/// Projects fine operators through `w`.
pub fn project_operators(fine: &FineOperators, w: &DenseMatrix, n_free: usize, fixed: &[f64]) -> Result<ReducedSystem> {
    if w.cols() != fine.n_nodes() {
        return Err(ReducedError::SizeMismatch { expected: fine.n_nodes(), got: w.cols() });
    }
    if n_free + fixed.len() != w.rows() {
        return Err(ReducedError::SizeMismatch { expected: w.rows(), got: n_free + fixed.len() });
    }
    check_stochastic(w, 1e-10)?;
    let p = w.rows();
    let m0 = fine.m0.congruence(w).expect("shapes checked");
    let w1 = edge_lift(w, &fine.edges);
    let m1 = fine.m1.congruence(&w1).expect("shapes checked");
    let d0 = complete_graph_incidence(p);
    let k = d0.tr_matmul(&m1.matmul(&d0).expect("square")).expect("square");
    Ok(ReducedSystem { w: w.clone(), m0, m1, d0, k, n_free, fixed: fixed.to_vec() })
}

/// `max |δ0′Wᵀ − W1ᵀδ0|`.
pub fn projection_identity_deviation(fine: &FineOperators, w: &DenseMatrix) -> f64 {
    let lhs = fine.d0.mul_dense(&w.transpose()).expect("fine sizes");
    let w1 = edge_lift(w, &fine.edges);
    let rhs = w1.tr_matmul(&complete_graph_incidence(w.rows())).expect("sizes");
    lhs.max_abs_diff(&rhs).expect("same shape")
}

/// Fine nodal values `Wᵀ u` of reduced coefficients `u` (`P_total × F`).
pub fn reconstruct_field(u_reduced: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    if u_reduced.rows() != w.rows() {
        return Err(ReducedError::SizeMismatch { expected: w.rows(), got: u_reduced.rows() });
    }
    Ok(w.tr_matmul(u_reduced).expect("sizes checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feec::assemble;
    use crate::linalg::sym_eig;
    use crate::mesh::{generate_annulus_polygon, rectangle, DiagonalPattern, GeometrySpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn annulus() -> Mesh {
        generate_annulus_polygon(&GeometrySpec {
            n_sides: 4,
            poly_radius: 0.4,
            outer_radius: 1.0,
            rotation: 0.1,
            radial_layers: 2,
            angular_resolution: 12,
            seed: 0,
        })
        .unwrap()
    }

    fn random_stochastic(p: usize, n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let mut w = DenseMatrix::from_fn(p, n, |_, _| rng.random_range(0.0..1.0));
        for (j, s) in w.col_sums().into_iter().enumerate() {
            for i in 0..p {
                w[(i, j)] /= s;
            }
        }
        w
    }

    #[test]
    fn constant_data_partition() {
        let mesh = annulus();
        let g = dirichlet_partitions(&mesh, "inner", &[1.0; 12]).unwrap();
        assert_eq!(g.data.len(), 1);
        let (psi, s) = &g.data[0];
        assert_eq!(*s, 12.0);
        for &v in psi {
            assert_eq!(v, 1.0 / 12.0);
            assert_eq!(s * v, 1.0);
        }
    }

    #[test]
    fn zero_and_mixed_data() {
        let mesh = annulus();
        let g = dirichlet_partitions(&mesh, "outer", &[0.0; 12]).unwrap();
        assert_eq!(g.data[0].1, 0.0);
        let mixed: Vec<f64> = (0..12).map(|k| (k as f64 - 5.5) * 0.3).collect();
        let g = dirichlet_partitions(&mesh, "outer", &mixed).unwrap();
        assert_eq!(g.data.len(), 2);
        for k in 0..12 {
            let u: f64 = g.data.iter().map(|(psi, s)| s * psi[k]).sum();
            assert!((u - mixed[k]).abs() <= 1e-15 * mixed[k].abs().max(1.0));
            assert!(g.rest[k] >= 0.0);
        }
        assert!(matches!(
            dirichlet_partitions(&mesh, "outer", &[1.0; 3]),
            Err(ReducedError::BoundaryLength { .. })
        ));
        assert!(matches!(dirichlet_partitions(&mesh, "nope", &[]), Err(ReducedError::UnknownSideset(_))));
    }

    #[test]
    fn positive_data_reconstructs_exactly() {
        let mesh = annulus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u_b: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..2.0)).collect();
        let g = dirichlet_partitions(&mesh, "inner", &u_b).unwrap();
        let (psi, s) = &g.data[0];
        for k in 0..12 {
            assert!((s * psi[k] - u_b[k]).abs() <= 2.0 * f64::EPSILON * u_b[k]);
        }
    }

    fn layout_and_w(mesh: &Mesh, p_free: usize, seed: u64) -> (BoundaryLayout, DenseMatrix) {
        let data = DirichletData::constant(mesh, &[("inner", 1.0), ("outer", 0.0)]).unwrap();
        let layout = BoundaryLayout::new(mesh, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = DenseMatrix::from_fn(mesh.n_nodes(), p_free, |_, _| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let w = partition_on_tape(&tape, tape.constant(logits), &layout, 0).unwrap();
        let out = tape.value(w).clone();
        (layout, out)
    }

    #[test]
    fn partition_is_stochastic_with_exact_boundary() {
        let mesh = annulus();
        let (layout, w) = layout_and_w(&mesh, 5, 1);
        assert_eq!(w.rows(), 5 + layout.n_fixed());
        check_stochastic(&w, 1e-12).unwrap();
        let mut u = vec![0.0; 5];
        for (k, v) in u.iter_mut().enumerate() {
            *v = 10.0 * k as f64 - 7.0;
        }
        u.extend_from_slice(&layout.coefficients[0]);
        let fine = reconstruct_field(&DenseMatrix::column_vector(&u), &w).unwrap();
        for &node in &mesh.sidesets["inner"].nodes {
            assert!((fine[(node, 0)] - 1.0).abs() <= 1e-14);
            for r in 0..5 {
                assert_eq!(w[(r, node)], 0.0);
            }
        }
        for &node in &mesh.sidesets["outer"].nodes {
            assert_eq!(fine[(node, 0)], 0.0);
        }
    }

    #[test]
    fn zero_logits_give_uniform_interior() {
        let mesh = annulus();
        let data = DirichletData::constant(&mesh, &[("inner", 1.0), ("outer", 0.0)]).unwrap();
        let layout = BoundaryLayout::new(&mesh, &data).unwrap();
        let tape = Tape::new();
        let w = partition_on_tape(&tape, tape.constant(DenseMatrix::zeros(mesh.n_nodes(), 4)), &layout, 0).unwrap();
        let w = tape.value(w);
        for j in 0..mesh.n_nodes() {
            if !layout.dirichlet[j] {
                for i in 0..4 {
                    assert_eq!(w[(i, j)], 0.25);
                }
            }
        }
    }

    #[test]
    fn identity_partition_reproduces_fine_operators() {
        let mesh = rectangle(2, 2, 1.0, 1.0, DiagonalPattern::Uniform).unwrap();
        let fine = assemble(&mesh).unwrap();
        let n = mesh.n_nodes();
        let sys = project_operators(&fine, &DenseMatrix::identity(n), n, &[]).unwrap();
        assert!(sys.m0.max_abs_diff(&fine.m0.to_dense()).unwrap() < 1e-15);
        let w1 = edge_lift(&DenseMatrix::identity(n), &fine.edges);
        let pairs = reduced_edges(n);
        for (e, &(a, b)) in fine.edges.iter().enumerate() {
            let r = pairs.iter().position(|&p| p == (a, b)).unwrap();
            assert_eq!(w1[(r, e)], 1.0);
            assert_eq!(w1.column(e).iter().filter(|v| **v != 0.0).count(), 1);
        }
        assert!(sys.k.max_abs_diff(&fine.k.to_dense()).unwrap() < 1e-12);
    }

    #[test]
    fn projection_identities_on_random_partitions() {
        let mesh = annulus();
        let fine = assemble(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let p = rng.random_range(2..9);
            let w = random_stochastic(p, mesh.n_nodes(), &mut rng);
            let sys = project_operators(&fine, &w, p, &[]).unwrap();
            assert!(projection_identity_deviation(&fine, &w) <= 1e-10);
            let area: f64 = sys.m0.sum();
            assert!((area - mesh.total_area()).abs() < 1e-12);
            let kdirect = fine.k.congruence(&w).unwrap();
            assert!(sys.k.max_abs_diff(&kdirect).unwrap() <= 1e-10);
            for s in sys.k.col_sums() {
                assert!(s.abs() <= 1e-10);
            }
            let d1 = sys.d0.matvec(&vec![1.0; p]).unwrap();
            assert!(d1.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn free_stiffness_is_spd_with_dirichlet_partitions() {
        let mesh = annulus();
        let fine = assemble(&mesh).unwrap();
        let (layout, w) = layout_and_w(&mesh, 6, 4);
        let sys = project_operators(&fine, &w, 6, &layout.coefficients[0]).unwrap();
        let eig = sym_eig(&sys.k_free()).unwrap();
        assert!(eig.values[0] > 0.0);
    }

    #[test]
    fn tape_projection_matches_values() {
        let mesh = annulus();
        let fine = assemble(&mesh).unwrap();
        let shared = FineShared::from(&fine);
        let (_, w) = layout_and_w(&mesh, 3, 5);
        let sys = project_operators(&fine, &w, w.rows(), &[]).unwrap();
        let tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let d0 = tape.constant(complete_graph_incidence(w.rows()));
        let (m1, k) = project_on_tape(&tape, wv, &shared, d0).unwrap();
        assert!(tape.value(m1).max_abs_diff(&sys.m1).unwrap() < 1e-13);
        assert!(tape.value(k).max_abs_diff(&sys.k).unwrap() < 1e-13);
    }

    #[test]
    fn reconstruct_constant_and_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_stochastic(4, 9, &mut rng);
        let c = reconstruct_field(&DenseMatrix::filled(4, 1, 2.5), &w).unwrap();
        assert!(c.as_slice().iter().all(|v| (v - 2.5).abs() < 1e-14));
        let mut e = DenseMatrix::zeros(4, 1);
        e[(2, 0)] = 1.0;
        let r = reconstruct_field(&e, &w).unwrap();
        assert_eq!(r.column(0), w.row(2).to_vec());
    }

    #[test]
    fn multi_field_layout_is_padded() {
        let mesh = annulus();
        let inner = DenseMatrix::from_fn(12, 2, |k, f| if f == 0 { 1.0 } else { k as f64 - 5.5 });
        let outer = DenseMatrix::zeros(12, 2);
        let data = DirichletData {
            values: BTreeMap::from([("inner".to_string(), inner), ("outer".to_string(), outer)]),
        };
        let layout = BoundaryLayout::new(&mesh, &data).unwrap();
        // inner: two data partitions (mixed sign in field 1) + rest; outer: one + rest.
        assert_eq!(layout.n_fixed(), 5);
        for f in 0..2 {
            let sums = layout.rows[f].col_sums();
            for (j, &d) in layout.dirichlet.iter().enumerate() {
                assert_eq!(sums[j], if d { sums[j] } else { 0.0 });
                if d {
                    assert!((sums[j] - 1.0).abs() < 1e-15);
                }
            }
        }
    }
}
