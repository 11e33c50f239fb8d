//! Fine Whitney-form operators on a triangle mesh.
//!
//! Nodal hat functions span W0, edge functions `λa∇λb − λb∇λa` span W1. All
//! integrals are products of barycentric coordinates and constant gradients,
//! so every entry is computed in closed form from `∫λiλj = A(1+δij)/12`.

use std::collections::HashMap;

use thiserror::Error;

use crate::linalg::{SparseMatrix, TripletBuilder};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeecError {
    #[error("triangle {triangle} is degenerate: area {area:e} below {threshold:e}")]
    DegenerateTriangle { triangle: usize, area: f64, threshold: f64 },
}

#[derive(Debug, Clone)]
pub struct FineOperators {
    /// Nodal mass, N×N.
    pub m0: SparseMatrix,
    /// Whitney-1 mass, E×E.
    pub m1: SparseMatrix,
    /// Incidence, E×N: row `e` is −1 at `edges[e].0` and +1 at `edges[e].1`.
    pub d0: SparseMatrix,
    /// `d0ᵀ m1 d0`, N×N.
    pub k: SparseMatrix,
    /// Edges `(a, b)` with `a < b`, sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
}

impl FineOperators {
    pub fn n_nodes(&self) -> usize {
        self.m0.rows()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_index(&self) -> HashMap<(usize, usize), usize> {
        self.edges.iter().enumerate().map(|(i, &e)| (e, i)).collect()
    }
}

/// Area and barycentric gradients of triangle `t`.
pub(crate) fn triangle_geometry(mesh: &Mesh, t: usize) -> (f64, [[f64; 2]; 3]) {
    let tri = mesh.triangles[t];
    let p = tri.map(|v| mesh.nodes[v]);
    let area = mesh.signed_area(t);
    let mut grads = [[0.0; 2]; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        grads[i] = [(p[j][1] - p[k][1]) / (2.0 * area), (p[k][0] - p[j][0]) / (2.0 * area)];
    }
    (area, grads)
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// `∫_T λi λj`.
fn bary_mass(area: f64, i: usize, j: usize) -> f64 {
    if i == j {
        area / 6.0
    } else {
        area / 12.0
    }
}

/// `∫_T (λa∇λb − λb∇λa)·(λc∇λd − λd∇λc)` for local vertex indices.
fn whitney_pair(area: f64, g: &[[f64; 2]; 3], (a, b): (usize, usize), (c, d): (usize, usize)) -> f64 {
    bary_mass(area, a, c) * dot(g[b], g[d]) - bary_mass(area, a, d) * dot(g[b], g[c])
        - bary_mass(area, b, c) * dot(g[a], g[d])
        + bary_mass(area, b, d) * dot(g[a], g[c])
}

pub fn assemble(mesh: &Mesh) -> Result<FineOperators, FeecError> {
    let n = mesh.n_nodes();
    let (lo, hi) = mesh.bounding_box();
    // Squared largest extent stands in for the bounding-box area so that a
    // mesh collapsed onto a line still has a meaningful scale.
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let threshold = 1e-14 * extent * extent;
    let mut edges: Vec<(usize, usize)> = mesh.edge_triangles().into_keys().collect();
    edges.sort_unstable();
    let edge_id: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let n_edges = edges.len();

    let mut m0 = TripletBuilder::new(n, n);
    let mut m1 = TripletBuilder::new(n_edges, n_edges);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (area, grads) = triangle_geometry(mesh, t);
        if !(area > threshold) {
            return Err(FeecError::DegenerateTriangle { triangle: t, area, threshold });
        }
        for i in 0..3 {
            for j in 0..3 {
                m0.push(tri[i], tri[j], bary_mass(area, i, j));
            }
        }
        // Local edges in global orientation (lower global index first).
        let local: Vec<((usize, usize), usize)> = [(0, 1), (0, 2), (1, 2)]
            .into_iter()
            .map(|(i, j)| {
                let (li, lj) = if tri[i] < tri[j] { (i, j) } else { (j, i) };
                ((li, lj), edge_id[&(tri[li], tri[lj])])
            })
            .collect();
        for &(le, ge) in &local {
            for &(lf, gf) in &local {
                m1.push(ge, gf, whitney_pair(area, &grads, le, lf));
            }
        }
    }
    let m0 = m0.build();
    let m1 = m1.build();

    let mut d0 = TripletBuilder::new(n_edges, n);
    for (e, &(a, b)) in edges.iter().enumerate() {
        d0.push(e, a, -1.0);
        d0.push(e, b, 1.0);
    }
    let d0 = d0.build();

    let mut k = TripletBuilder::new(n, n);
    for e in 0..n_edges {
        let (ea, eb) = edges[e];
        for (f, v) in m1.row(e) {
            let (fa, fb) = edges[f];
            k.push(ea, fa, v);
            k.push(ea, fb, -v);
            k.push(eb, fa, -v);
            k.push(eb, fb, v);
        }
    }
    let k = k.build();
    Ok(FineOperators { m0, m1, d0, k, edges })
}

/// P1 stiffness from the cotangent formula, assembled without Whitney forms.
pub fn p1_stiffness_cotangent(mesh: &Mesh) -> SparseMatrix {
    let n = mesh.n_nodes();
    let mut b = TripletBuilder::new(n, n);
    for tri in &mesh.triangles {
        for k in 0..3 {
            // Angle at vertex k couples the opposite pair (i, j).
            let (i, j) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let p = mesh.nodes[tri[k]];
            let u = [mesh.nodes[i][0] - p[0], mesh.nodes[i][1] - p[1]];
            let v = [mesh.nodes[j][0] - p[0], mesh.nodes[j][1] - p[1]];
            let cot = dot(u, v) / (u[0] * v[1] - u[1] * v[0]).abs();
            let w = 0.5 * cot;
            b.push(i, j, -w);
            b.push(j, i, -w);
            b.push(i, i, w);
            b.push(j, j, w);
        }
    }
    b.build()
}

/// `max |d0ᵀ m1 d0 − K_P1|` against the cotangent stiffness.
pub fn stiffness_identity_check(mesh: &Mesh, ops: &FineOperators) -> f64 {
    let reference = p1_stiffness_cotangent(mesh).to_dense();
    ops.k.max_abs_diff_dense(&reference).unwrap_or(f64::INFINITY)
}
