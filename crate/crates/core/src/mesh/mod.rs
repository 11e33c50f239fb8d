//! Simplicial 2D meshes with labelled boundary sidesets.

mod generate;
mod io;

pub use generate::{generate_annulus_polygon, rectangle, DiagonalPattern, GeometrySpec};
pub use io::{load_mesh, mesh_from_json, mesh_to_json, save_mesh};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boundary type vocabulary; a sideset's `label` indexes into this.
pub const LABELS: [&str; 5] = ["inner", "outer", "wall", "inlet", "outlet"];

pub fn label_index(name: &str) -> Option<usize> {
    LABELS.iter().position(|l| *l == name)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("triangle {triangle} references node {node} but the mesh has {n_nodes} nodes")]
    NodeOutOfRange { triangle: usize, node: usize, n_nodes: usize },
    #[error("triangle {triangle} has non-positive signed area {area:e}")]
    NonPositiveArea { triangle: usize, area: f64 },
    #[error("edge ({a}, {b}) is shared by {count} triangles")]
    NonManifoldEdge { a: usize, b: usize, count: usize },
    #[error("node {node} appears in sidesets `{first}` and `{second}`")]
    OverlappingSidesets { node: usize, first: String, second: String },
    #[error("boundary node {node} is not covered by any sideset")]
    UncoveredBoundaryNode { node: usize },
    #[error("sideset `{name}` contains node {node}, which is not on the boundary")]
    InteriorSidesetNode { name: String, node: usize },
    #[error("sideset `{name}` has label {label}, outside the {n} known labels")]
    BadLabel { name: String, label: usize, n: usize },
    #[error("node {node} has a non-finite coordinate")]
    NonFiniteNode { node: usize },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("malformed mesh file at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, MeshError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sideset {
    /// Index into [`LABELS`].
    pub label: usize,
    /// Node indices, ascending.
    pub nodes: Vec<usize>,
}

/// Triangle mesh. Triangles are counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub sidesets: BTreeMap<String, Sideset>,
}

/// A boundary edge oriented with the domain on its left.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    /// Sideset shared by both endpoints, if any.
    pub sideset: Option<String>,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.signed_area(t)).sum()
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Map from each undirected edge `(lo, hi)` to the triangles using it.
    pub fn edge_triangles(&self) -> HashMap<(usize, usize), Vec<usize>> {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        map
    }

    /// Per-node flag: lies on some boundary edge.
    pub fn boundary_mask(&self) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.n_nodes()];
        for e in self.boundary_edges()? {
            mask[e.a] = true;
            mask[e.b] = true;
        }
        Ok(mask)
    }

    /// Sideset name per node (`None` for interior nodes).
    pub fn node_sidesets(&self) -> Vec<Option<&str>> {
        let mut out = vec![None; self.n_nodes()];
        for (name, s) in &self.sidesets {
            for &n in &s.nodes {
                if n < out.len() {
                    out[n] = Some(name.as_str());
                }
            }
        }
        out
    }

    /// Edges used by exactly one triangle, oriented so the domain is on the
    /// left: counterclockwise around the outside, clockwise around holes.
    pub fn boundary_edges(&self) -> Result<Vec<BoundaryEdge>> {
        let owners = self.node_sidesets();
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((&(a, b), &c)) = count.iter().filter(|(_, &c)| c > 2).min_by_key(|(k, _)| **k) {
            return Err(MeshError::NonManifoldEdge { a, b, count: c });
        }
        let mut edges = Vec::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if count[&(a.min(b), a.max(b))] == 1 {
                    let sideset = match (owners[a], owners[b]) {
                        (Some(x), Some(y)) if x == y => Some(x.to_string()),
                        _ => None,
                    };
                    edges.push(BoundaryEdge { a, b, sideset });
                }
            }
        }
        Ok(edges)
    }

    /// Chains boundary edges into closed loops of node indices.
    pub fn boundary_loops(&self) -> Result<Vec<Vec<usize>>> {
        let edges = self.boundary_edges()?;
        let mut next: HashMap<usize, usize> = HashMap::new();
        for e in &edges {
            if next.insert(e.a, e.b).is_some() {
                return Err(MeshError::Degenerate(format!("boundary pinches at node {}", e.a)));
            }
        }
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        let mut seen = vec![false; self.n_nodes()];
        let mut loops = Vec::new();
        for s in starts {
            if seen[s] {
                continue;
            }
            let mut lp = vec![s];
            seen[s] = true;
            let mut cur = next[&s];
            while cur != s {
                if seen[cur] {
                    return Err(MeshError::Degenerate(format!("open boundary chain at node {cur}")));
                }
                seen[cur] = true;
                lp.push(cur);
                cur = *next
                    .get(&cur)
                    .ok_or_else(|| MeshError::Degenerate(format!("boundary chain ends at node {cur}")))?;
            }
            loops.push(lp);
        }
        Ok(loops)
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.edge_triangles().len()
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_degrees(&self) -> f64 {
        let mut worst = 180.0_f64;
        for tri in &self.triangles {
            for k in 0..3 {
                let p = self.nodes[tri[k]];
                let q = self.nodes[tri[(k + 1) % 3]];
                let r = self.nodes[tri[(k + 2) % 3]];
                let u = [q[0] - p[0], q[1] - p[1]];
                let v = [r[0] - p[0], r[1] - p[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / ((u[0].hypot(u[1])) * (v[0].hypot(v[1])));
                worst = worst.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        worst
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.nodes.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(MeshError::NonFiniteNode { node: i });
            }
        }
        let n = self.n_nodes();
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(MeshError::NodeOutOfRange { triangle: t, node: v, n_nodes: n });
                }
            }
        }
        for t in 0..self.n_triangles() {
            let area = self.signed_area(t);
            if !(area > 0.0) {
                return Err(MeshError::NonPositiveArea { triangle: t, area });
            }
        }
        let mut owner: Vec<Option<&str>> = vec![None; n];
        for (name, s) in &self.sidesets {
            if s.label >= LABELS.len() {
                return Err(MeshError::BadLabel { name: name.clone(), label: s.label, n: LABELS.len() });
            }
            for &v in &s.nodes {
                if v >= n {
                    return Err(MeshError::Degenerate(format!(
                        "sideset `{name}` references node {v} but the mesh has {n} nodes"
                    )));
                }
                if let Some(first) = owner[v] {
                    return Err(MeshError::OverlappingSidesets {
                        node: v,
                        first: first.to_string(),
                        second: name.clone(),
                    });
                }
                owner[v] = Some(name);
            }
        }
        let boundary = self.boundary_mask()?;
        for (v, &on_boundary) in boundary.iter().enumerate() {
            if on_boundary && owner[v].is_none() {
                return Err(MeshError::UncoveredBoundaryNode { node: v });
            }
            if !on_boundary {
                if let Some(name) = owner[v] {
                    return Err(MeshError::InteriorSidesetNode { name: name.to_string(), node: v });
                }
            }
        }
        Ok(())
    }

    /// Rigidly rotated (radians, about the origin) then translated copy.
    pub fn transformed(&self, rotation: f64, translation: [f64; 2]) -> Mesh {
        let (s, c) = rotation.sin_cos();
        let nodes = self
            .nodes
            .iter()
            .map(|p| [c * p[0] - s * p[1] + translation[0], s * p[0] + c * p[1] + translation[1]])
            .collect();
        Mesh { nodes, triangles: self.triangles.clone(), sidesets: self.sidesets.clone() }
    }

    pub fn sideset(&self, name: &str) -> Option<&Sideset> {
        self.sidesets.get(name)
    }
}
