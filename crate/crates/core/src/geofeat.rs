//! Intrinsic per-node geometry features.
//!
//! Heat kernel signature (and its spatial gradient) from the Dirichlet
//! Laplace spectrum, harmonic coordinates between boundary groups, distance
//! to the boundary, and one-hot sideset labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feec::{triangle_geometry, FineOperators};
use crate::linalg::{generalized_sym_eig, solve_spd, DenseMatrix, LinalgError};
use crate::mesh::{Mesh, MeshError, LABELS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeofeatError {
    #[error("requested {requested} eigenpairs but only {interior} interior nodes exist")]
    TooManyEigs { requested: usize, interior: usize },
    #[error("diffusion times must be positive and ascending")]
    InvalidTimes,
    #[error("sideset `{0}` does not exist")]
    UnknownSideset(String),
    #[error("boundary group `{0}` is empty")]
    EmptyGroup(String),
    #[error("node {node} belongs to both groups of pair ({first}, {second})")]
    OverlappingGroups { node: usize, first: String, second: String },
    #[error("feature blocks disagree on node count: expected {expected}, `{block}` has {got}")]
    DimensionMismatch { block: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub type Result<T> = std::result::Result<T, GeofeatError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_times: usize,
    pub n_eigs: usize,
    /// `(Γ_i, Γ_j)` sideset pairs; derived from the mesh when absent.
    pub group_pairs: Option<Vec<(String, String)>>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { n_times: 8, n_eigs: 32, group_pairs: None }
    }
}

/// Dirichlet Laplace eigenpairs, `M`-orthonormal, zero on boundary nodes.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// N×k, eigenvectors as columns.
    pub vectors: DenseMatrix,
}

/// Lowest `n_eigs` interior eigenpairs of `K φ = λ M φ`, extended to the end
/// of any eigenvalue cluster (relative gap below `1e-8`) it would cut.
pub fn interior_spectrum(fine: &FineOperators, mesh: &Mesh, n_eigs: usize) -> Result<Spectrum> {
    let boundary = mesh.boundary_mask()?;
    let interior: Vec<usize> = (0..mesh.n_nodes()).filter(|&i| !boundary[i]).collect();
    if n_eigs > interior.len() || n_eigs == 0 {
        return Err(GeofeatError::TooManyEigs { requested: n_eigs, interior: interior.len() });
    }
    let k = fine.k.to_dense().submatrix(&interior, &interior);
    let m = fine.m0.to_dense().submatrix(&interior, &interior);
    let eig = generalized_sym_eig(&k, &m)?;
    let mut count = n_eigs;
    while count < interior.len() {
        let (prev, next) = (eig.values[count - 1], eig.values[count]);
        if next - prev > 1e-8 * next.abs() {
            break;
        }
        count += 1;
    }
    let mut vectors = DenseMatrix::zeros(mesh.n_nodes(), count);
    for (r, &node) in interior.iter().enumerate() {
        for c in 0..count {
            vectors[(node, c)] = eig.vectors[(r, c)];
        }
    }
    Ok(Spectrum { values: eig.values[..count].to_vec(), vectors })
}

/// `n` times log-uniform over `[4 ln10 / λ_max, 4 ln10 / λ_min]`.
pub fn default_times(spectrum: &Spectrum, n: usize) -> Vec<f64> {
    let c = 4.0 * std::f64::consts::LN_10;
    let lo = (c / spectrum.values[spectrum.values.len() - 1]).ln();
    let hi = (c / spectrum.values[0]).ln();
    if n == 1 {
        return vec![lo.exp()];
    }
    (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// `(hks N×T, hks_grad N×2T)`; gradient columns are `(∂x, ∂y)` per time.
pub fn heat_kernel_signature(
    spectrum: &Spectrum,
    mesh: &Mesh,
    times: &[f64],
) -> Result<(DenseMatrix, DenseMatrix)> {
    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GeofeatError::InvalidTimes);
    }
    let n = mesh.n_nodes();
    let phi = &spectrum.vectors;
    let hks = DenseMatrix::from_fn(n, times.len(), |x, ti| {
        spectrum
            .values
            .iter()
            .enumerate()
            .map(|(k, &lam)| phi[(x, k)] * phi[(x, k)] * (-times[ti] * lam).exp())
            .sum()
    });
    Ok((hks.clone(), nodal_gradient(mesh, &hks)))
}

/// Area-weighted average over incident triangles of the P1 gradient of each
/// column of `f`. Returns N×2C with columns `(∂x, ∂y)` per input column.
pub fn nodal_gradient(mesh: &Mesh, f: &DenseMatrix) -> DenseMatrix {
    let n = mesh.n_nodes();
    let c = f.cols();
    let mut acc = DenseMatrix::zeros(n, 2 * c);
    let mut weight = vec![0.0; n];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (area, grads) = triangle_geometry(mesh, t);
        for col in 0..c {
            let mut g = [0.0; 2];
            for (i, &v) in tri.iter().enumerate() {
                g[0] += f[(v, col)] * grads[i][0];
                g[1] += f[(v, col)] * grads[i][1];
            }
            for &v in tri {
                acc[(v, 2 * col)] += area * g[0];
                acc[(v, 2 * col + 1)] += area * g[1];
            }
        }
        for &v in tri {
            weight[v] += area;
        }
    }
    for (v, w) in weight.into_iter().enumerate() {
        if w > 0.0 {
            for x in acc.row_mut(v) {
                *x /= w;
            }
        }
    }
    acc
}

/// Sideset pairs used when the configuration names none.
pub fn default_group_pairs(mesh: &Mesh) -> Vec<(String, String)> {
    [("inner", "outer"), ("inlet", "outlet")]
        .into_iter()
        .filter(|(a, b)| mesh.sidesets.contains_key(*a) && mesh.sidesets.contains_key(*b))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

/// Discrete harmonic functions, 1 on `Γ_i` and 0 on `Γ_j` with natural
/// conditions elsewhere; one column per pair.
pub fn harmonic_coordinates(fine: &FineOperators, mesh: &Mesh, pairs: &[(String, String)]) -> Result<DenseMatrix> {
    let n = mesh.n_nodes();
    let k = fine.k.to_dense();
    let mut out = DenseMatrix::zeros(n, pairs.len());
    for (col, (gi, gj)) in pairs.iter().enumerate() {
        let mut fixed: Vec<Option<f64>> = vec![None; n];
        for (name, value) in [(gi, 1.0), (gj, 0.0)] {
            let set = mesh.sideset(name).ok_or_else(|| GeofeatError::UnknownSideset(name.clone()))?;
            if set.nodes.is_empty() {
                return Err(GeofeatError::EmptyGroup(name.clone()));
            }
            for &v in &set.nodes {
                if fixed[v].is_some() {
                    return Err(GeofeatError::OverlappingGroups { node: v, first: gi.clone(), second: gj.clone() });
                }
                fixed[v] = Some(value);
            }
        }
        let free: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
        let rhs: Vec<f64> = free
            .iter()
            .map(|&r| -(0..n).filter_map(|c| fixed[c].map(|v| k[(r, c)] * v)).sum::<f64>())
            .collect();
        let sol = solve_spd(&k.submatrix(&free, &free), &DenseMatrix::column_vector(&rhs))?;
        for (v, f) in fixed.iter().enumerate() {
            if let Some(x) = f {
                out[(v, col)] = *x;
            }
        }
        for (r, &v) in free.iter().enumerate() {
            out[(v, col)] = sol[(r, 0)];
        }
    }
    Ok(out)
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - s * ab[0], ap[1] - s * ab[1]];
    d[0].hypot(d[1])
}

/// Unsigned distance from each node to the nearest boundary segment, N×1.
pub fn distance_field(mesh: &Mesh) -> Result<DenseMatrix> {
    let edges = mesh.boundary_edges()?;
    let boundary = mesh.boundary_mask()?;
    Ok(DenseMatrix::from_fn(mesh.n_nodes(), 1, |v, _| {
        if boundary[v] {
            return 0.0;
        }
        let p = mesh.nodes[v];
        edges
            .iter()
            .map(|e| point_segment_distance(p, mesh.nodes[e.a], mesh.nodes[e.b]))
            .fold(f64::INFINITY, f64::min)
    }))
}

/// One-hot sideset label per node (N×5); interior rows are zero.
pub fn label_one_hot(mesh: &Mesh) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(mesh.n_nodes(), LABELS.len());
    for set in mesh.sidesets.values() {
        for &v in &set.nodes {
            out[(v, set.label)] = 1.0;
        }
    }
    out
}

/// Standardizes each column to zero mean and unit population variance.
/// Columns with no spread become zero.
pub fn standardize_columns(m: &mut DenseMatrix) {
    let n = m.rows() as f64;
    for c in 0..m.cols() {
        let col = m.column(c);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let flat = sd <= 1e-12 * mean.abs().max(1e-300) || sd == 0.0;
        let scaled: Vec<f64> = col.iter().map(|x| if flat { 0.0 } else { (x - mean) / sd }).collect();
        m.set_column(c, &scaled);
    }
}

/// `[hks | hks_grad | harmonic | sdf | labels]` with all but the label block
/// standardized.
pub fn assemble_features(
    hks: &DenseMatrix,
    hks_grad: &DenseMatrix,
    harmonic: &DenseMatrix,
    sdf: &DenseMatrix,
    labels: &DenseMatrix,
) -> Result<DenseMatrix> {
    let n = hks.rows();
    for (block, m) in [("hks_grad", hks_grad), ("harmonic", harmonic), ("sdf", sdf), ("labels", labels)] {
        if m.rows() != n {
            return Err(GeofeatError::DimensionMismatch { block, expected: n, got: m.rows() });
        }
    }
    let blocks = [hks, hks_grad, harmonic, sdf];
    let n_cont: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut cont = DenseMatrix::zeros(n, n_cont);
    let mut offset = 0;
    for b in blocks {
        for c in 0..b.cols() {
            cont.set_column(offset + c, &b.column(c));
        }
        offset += b.cols();
    }
    standardize_columns(&mut cont);
    Ok(DenseMatrix::from_fn(n, n_cont + labels.cols(), |r, c| {
        if c < n_cont {
            cont[(r, c)]
        } else {
            labels[(r, c - n_cont)]
        }
    }))
}

#[derive(Debug, Clone)]
pub struct GeoFeatures {
    pub hks: DenseMatrix,
    pub hks_grad: DenseMatrix,
    pub harmonic: DenseMatrix,
    pub sdf: DenseMatrix,
    pub labels: DenseMatrix,
    pub times: Vec<f64>,
    pub matrix: DenseMatrix,
}

impl GeoFeatures {
    pub fn d_in(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn compute_features(mesh: &Mesh, fine: &FineOperators, config: &FeatureConfig) -> Result<GeoFeatures> {
    let boundary = mesh.boundary_mask()?;
    let interior = boundary.iter().filter(|b| !**b).count();
    let spectrum = interior_spectrum(fine, mesh, config.n_eigs.min(interior))?;
    let times = default_times(&spectrum, config.n_times);
    let (hks, hks_grad) = heat_kernel_signature(&spectrum, mesh, &times)?;
    let pairs = config.group_pairs.clone().unwrap_or_else(|| default_group_pairs(mesh));
    let harmonic = harmonic_coordinates(fine, mesh, &pairs)?;
    let sdf = distance_field(mesh)?;
    let labels = label_one_hot(mesh);
    let matrix = assemble_features(&hks, &hks_grad, &harmonic, &sdf, &labels)?;
    Ok(GeoFeatures { hks, hks_grad, harmonic, sdf, labels, times, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feec::assemble;
    use crate::mesh::{generate_annulus_polygon, rectangle, DiagonalPattern, GeometrySpec};

    fn annulus(n: usize, rotation: f64) -> Mesh {
        generate_annulus_polygon(&GeometrySpec {
            n_sides: n,
            poly_radius: 0.4,
            outer_radius: 1.0,
            rotation,
            radial_layers: 3,
            angular_resolution: 24,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn default_layout_has_31_columns() {
        let mesh = annulus(4, 0.0);
        let fine = assemble(&mesh).unwrap();
        let f = compute_features(&mesh, &fine, &FeatureConfig::default()).unwrap();
        assert_eq!(f.d_in(), 31);
        assert!(f.matrix.is_finite());
        for c in 0..26 {
            let mean: f64 = f.matrix.column(c).iter().sum::<f64>() / mesh.n_nodes() as f64;
            assert!(mean.abs() <= 1e-12);
        }
    }

    #[test]
    fn hks_is_rigid_motion_invariant() {
        let mesh = annulus(3, 0.3);
        let moved = mesh.transformed(1.1, [2.5, -0.7]);
        let cfg = FeatureConfig::default();
        let a = compute_features(&mesh, &assemble(&mesh).unwrap(), &cfg).unwrap();
        let b = compute_features(&moved, &assemble(&moved).unwrap(), &cfg).unwrap();
        assert!(a.hks.max_abs_diff(&b.hks).unwrap() <= 1e-9 * a.hks.max_abs());
        assert!(a.harmonic.max_abs_diff(&b.harmonic).unwrap() <= 1e-9);
        assert!(a.sdf.max_abs_diff(&b.sdf).unwrap() <= 1e-12);
    }

    #[test]
    fn hks_single_mode_and_zero_time() {
        let mesh = annulus(6, 0.0);
        let fine = assemble(&mesh).unwrap();
        let spec = interior_spectrum(&fine, &mesh, 1).unwrap();
        let (hks, _) = heat_kernel_signature(&spec, &mesh, &[0.5]).unwrap();
        for v in 0..mesh.n_nodes() {
            let phi = spec.vectors[(v, 0)];
            assert!((hks[(v, 0)] - phi * phi * (-0.5 * spec.values[0]).exp()).abs() < 1e-15);
        }
        let spec = interior_spectrum(&fine, &mesh, 10).unwrap();
        let (hks, _) = heat_kernel_signature(&spec, &mesh, &[0.0]).unwrap();
        for v in 0..mesh.n_nodes() {
            let s: f64 = (0..spec.values.len()).map(|k| spec.vectors[(v, k)].powi(2)).sum();
            assert!((hks[(v, 0)] - s).abs() <= 1e-14 * s.max(1.0));
        }
    }

    #[test]
    fn hks_positive_inside_and_zero_on_boundary() {
        let mesh = annulus(4, 0.0);
        let fine = assemble(&mesh).unwrap();
        let f = compute_features(&mesh, &fine, &FeatureConfig::default()).unwrap();
        let boundary = mesh.boundary_mask().unwrap();
        for v in 0..mesh.n_nodes() {
            for t in 0..8 {
                if boundary[v] {
                    assert_eq!(f.hks[(v, t)], 0.0);
                } else {
                    assert!(f.hks[(v, t)] > 0.0);
                }
            }
        }
        assert!(f.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn eigen_clusters_are_kept_whole() {
        // Fourfold rotational symmetry forces doubly degenerate eigenvalues.
        let mesh = annulus(4, 0.0);
        let fine = assemble(&mesh).unwrap();
        let full = interior_spectrum(&fine, &mesh, 20).unwrap();
        let k = (1..full.values.len())
            .find(|&k| full.values[k] - full.values[k - 1] <= 1e-10 * full.values[k])
            .expect("a degenerate pair");
        let spec = interior_spectrum(&fine, &mesh, k).unwrap();
        assert_eq!(spec.values.len(), k + 1);
        assert!(matches!(interior_spectrum(&fine, &mesh, 1000), Err(GeofeatError::TooManyEigs { .. })));
    }

    #[test]
    fn harmonic_is_linear_on_channel() {
        let mesh = rectangle(10, 4, 2.0, 1.0, DiagonalPattern::Uniform).unwrap();
        let fine = assemble(&mesh).unwrap();
        let h = harmonic_coordinates(&fine, &mesh, &[("inlet".into(), "outlet".into())]).unwrap();
        for (v, p) in mesh.nodes.iter().enumerate() {
            assert!((h[(v, 0)] - (2.0 - p[0]) / 2.0).abs() <= 1e-10);
        }
        for &v in &mesh.sidesets["inlet"].nodes {
            assert_eq!(h[(v, 0)], 1.0);
        }
        for &v in &mesh.sidesets["outlet"].nodes {
            assert_eq!(h[(v, 0)], 0.0);
        }
    }

    #[test]
    fn harmonic_respects_maximum_principle() {
        for n in [3, 4, 6, 8] {
            let mesh = annulus(n, 0.2);
            let fine = assemble(&mesh).unwrap();
            let h = harmonic_coordinates(&fine, &mesh, &default_group_pairs(&mesh)).unwrap();
            assert!(h.as_slice().iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
        }
    }

    #[test]
    fn harmonic_errors() {
        let mesh = annulus(4, 0.0);
        let fine = assemble(&mesh).unwrap();
        let bad = harmonic_coordinates(&fine, &mesh, &[("inner".into(), "nope".into())]);
        assert!(matches!(bad, Err(GeofeatError::UnknownSideset(_))));
        let overlap = harmonic_coordinates(&fine, &mesh, &[("inner".into(), "inner".into())]);
        assert!(matches!(overlap, Err(GeofeatError::OverlappingGroups { .. })));
    }

    #[test]
    fn distance_on_square_and_annulus() {
        let mesh = rectangle(2, 2, 1.0, 1.0, DiagonalPattern::Uniform).unwrap();
        let d = distance_field(&mesh).unwrap();
        let centre = mesh.nodes.iter().position(|p| p[0] == 0.5 && p[1] == 0.5).unwrap();
        assert!((d[(centre, 0)] - 0.5).abs() < 1e-15);
        let boundary = mesh.boundary_mask().unwrap();
        for v in 0..mesh.n_nodes() {
            assert_eq!(d[(v, 0)] == 0.0, boundary[v]);
        }

        // Outer loop is a 24-gon of radius 1: the distance to it is at most
        // R − r and at least R cos(π/24) − r.
        let mesh = annulus(4, 0.0);
        let d = distance_field(&mesh).unwrap();
        let inner = mesh.sideset("inner").unwrap();
        for (v, p) in mesh.nodes.iter().enumerate() {
            let r = p[0].hypot(p[1]);
            let to_inner = inner.nodes.iter().map(|&i| (mesh.nodes[i][0] - p[0]).hypot(mesh.nodes[i][1] - p[1]));
            let upper = (1.0 - r).min(to_inner.fold(f64::INFINITY, f64::min));
            assert!(d[(v, 0)] <= upper + 1e-12);
            assert!(d[(v, 0)] >= 0.0);
        }
    }

    #[test]
    fn standardize_guards_constant_columns() {
        let mut m = DenseMatrix::from_fn(5, 2, |r, c| if c == 0 { 3.0 } else { r as f64 });
        standardize_columns(&mut m);
        assert!(m.column(0).iter().all(|&x| x == 0.0));
        let col = m.column(1);
        let var: f64 = col.iter().map(|x| x * x).sum::<f64>() / 5.0;
        assert!((var - 1.0).abs() < 1e-14);
        let err = assemble_features(&m, &DenseMatrix::zeros(4, 2), &m, &m, &m);
        assert!(matches!(err, Err(GeofeatError::DimensionMismatch { block: "hks_grad", .. })));
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let mesh = annulus(4, 0.5);
        let f = DenseMatrix::from_fn(mesh.n_nodes(), 1, |v, _| 2.0 * mesh.nodes[v][0] - 3.0 * mesh.nodes[v][1]);
        let g = nodal_gradient(&mesh, &f);
        for v in 0..mesh.n_nodes() {
            assert!((g[(v, 0)] - 2.0).abs() < 1e-12 && (g[(v, 1)] + 3.0).abs() < 1e-12);
        }
    }
}
