use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{label_index, Mesh, MeshError, Result, Sideset};

/// Circle of radius `outer_radius` with a regular `n_sides`-gon cut out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub n_sides: usize,
    /// Circumradius of the polygonal hole.
    pub poly_radius: f64,
    pub outer_radius: f64,
    /// Polygon rotation in radians.
    pub rotation: f64,
    pub radial_layers: usize,
    /// Nodes per ring; must be a multiple of `n_sides` so the polygon
    /// corners are mesh nodes.
    pub angular_resolution: usize,
    pub seed: u64,
}

impl GeometrySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sides < 3 {
            return Err(MeshError::Degenerate(format!("n_sides = {} < 3", self.n_sides)));
        }
        if !(self.poly_radius > 0.0 && self.poly_radius < self.outer_radius) || !self.outer_radius.is_finite() {
            return Err(MeshError::Degenerate(format!(
                "need 0 < poly_radius ({}) < outer_radius ({})",
                self.poly_radius, self.outer_radius
            )));
        }
        if self.radial_layers < 1 {
            return Err(MeshError::Degenerate("radial_layers must be at least 1".into()));
        }
        if self.angular_resolution < 3 || self.angular_resolution % self.n_sides != 0 {
            return Err(MeshError::Degenerate(format!(
                "angular_resolution {} must be >= 3 and a multiple of n_sides {}",
                self.angular_resolution, self.n_sides
            )));
        }
        if !self.rotation.is_finite() {
            return Err(MeshError::Degenerate("rotation must be finite".into()));
        }
        Ok(())
    }

    /// Distance from the centre to the polygon boundary along direction `theta`.
    pub fn polygon_radius_at(&self, theta: f64) -> f64 {
        let sector = 2.0 * PI / self.n_sides as f64;
        let local = (theta - self.rotation).rem_euclid(sector) - 0.5 * sector;
        self.poly_radius * (PI / self.n_sides as f64).cos() / local.cos()
    }
}

/// Interpolation fractions `s_0 = 0 < ... < s_L = 1` of the rings.
///
/// Layer thickness grows geometrically by `q` with `q^(L-1)` equal to the
/// ratio of outer radius to polygon inradius, so radial and tangential
/// spacing scale together and small cutouts do not produce slivers.
fn layer_fractions(spec: &GeometrySpec) -> Vec<f64> {
    let layers = spec.radial_layers;
    if layers == 1 {
        return vec![0.0, 1.0];
    }
    let inradius = spec.poly_radius * (PI / spec.n_sides as f64).cos();
    let q = (spec.outer_radius / inradius).powf(1.0 / (layers - 1) as f64);
    let mut acc = vec![0.0];
    let mut thickness = 1.0;
    for _ in 0..layers {
        acc.push(acc.last().expect("nonempty") + thickness);
        thickness *= q;
    }
    let total = acc[layers];
    let mut out: Vec<f64> = acc.into_iter().map(|a| a / total).collect();
    out[layers] = 1.0;
    out
}

/// Structured annular mesh between the polygon and the outer circle.
///
/// Ring `l` of `radial_layers + 1` sits at `r = (1 - s_l) r_poly(θ) + s_l R`
/// (see [`layer_fractions`]); each quad between rings is split along its
/// shorter diagonal. Node `l * angular_resolution + k` is ring `l`, angle `k`.
pub fn generate_annulus_polygon(spec: &GeometrySpec) -> Result<Mesh> {
    spec.validate()?;
    let res = spec.angular_resolution;
    let layers = spec.radial_layers;
    let fractions = layer_fractions(spec);
    let mut nodes = Vec::with_capacity((layers + 1) * res);
    for &s in &fractions {
        for k in 0..res {
            let theta = spec.rotation + 2.0 * PI * k as f64 / res as f64;
            let r = (1.0 - s) * spec.polygon_radius_at(theta) + s * spec.outer_radius;
            nodes.push([r * theta.cos(), r * theta.sin()]);
        }
    }
    let idx = |l: usize, k: usize| l * res + (k % res);
    let dist = |a: usize, b: usize, nodes: &[[f64; 2]]| {
        let (p, q) = (nodes[a], nodes[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    };
    let mut triangles = Vec::with_capacity(2 * layers * res);
    for l in 0..layers {
        for k in 0..res {
            let a = idx(l, k);
            let b = idx(l, k + 1);
            let c = idx(l + 1, k + 1);
            let d = idx(l + 1, k);
            if dist(a, c, &nodes) <= dist(b, d, &nodes) {
                triangles.push([a, d, c]);
                triangles.push([a, c, b]);
            } else {
                triangles.push([a, d, b]);
                triangles.push([b, d, c]);
            }
        }
    }
    let sidesets = BTreeMap::from([
        (
            "inner".to_string(),
            Sideset { label: label_index("inner").expect("known label"), nodes: (0..res).collect() },
        ),
        (
            "outer".to_string(),
            Sideset {
                label: label_index("outer").expect("known label"),
                nodes: (layers * res..(layers + 1) * res).collect(),
            },
        ),
    ]);
    let mesh = Mesh { nodes, triangles, sidesets };
    mesh.validate()
        .map_err(|e| MeshError::Degenerate(format!("generated mesh is invalid: {e}")))?;
    Ok(mesh)
}

/// Diagonal choice for [`rectangle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalPattern {
    /// Every cell split lower-left to upper-right.
    Uniform,
    /// Left half `/`, right half `\`: mirror-symmetric about the vertical
    /// centre line when `nx` is even.
    Mirrored,
}

/// Structured `nx × ny` rectangle `[0, width] × [0, height]`.
///
/// Sidesets: `inlet` (x = 0, corners included), `outlet` (x = width, corners
/// included), `wall` (top and bottom without corners).
pub fn rectangle(nx: usize, ny: usize, width: f64, height: f64, pattern: DiagonalPattern) -> Result<Mesh> {
    if nx == 0 || ny == 0 || !(width > 0.0) || !(height > 0.0) {
        return Err(MeshError::Degenerate(format!("rectangle {nx}x{ny} of size {width}x{height}")));
    }
    let stride = nx + 1;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
        }
    }
    let id = |i: usize, j: usize| j * stride + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (p00, p10, p11, p01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            let slash = match pattern {
                DiagonalPattern::Uniform => true,
                DiagonalPattern::Mirrored => i < nx / 2,
            };
            if slash {
                triangles.push([p00, p10, p11]);
                triangles.push([p00, p11, p01]);
            } else {
                triangles.push([p00, p10, p01]);
                triangles.push([p10, p11, p01]);
            }
        }
    }
    let inlet: Vec<usize> = (0..=ny).map(|j| id(0, j)).collect();
    let outlet: Vec<usize> = (0..=ny).map(|j| id(nx, j)).collect();
    let mut wall: Vec<usize> = (1..nx).flat_map(|i| [id(i, 0), id(i, ny)]).collect();
    wall.sort_unstable();
    let sidesets = BTreeMap::from([
        ("inlet".to_string(), Sideset { label: label_index("inlet").expect("known"), nodes: inlet }),
        ("outlet".to_string(), Sideset { label: label_index("outlet").expect("known"), nodes: outlet }),
        ("wall".to_string(), Sideset { label: label_index("wall").expect("known"), nodes: wall }),
    ]);
    let mesh = Mesh { nodes, triangles, sidesets };
    mesh.validate()?;
    Ok(mesh)
}
