use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{Mesh, MeshError, Result, Sideset};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    sidesets: BTreeMap<String, Sideset>,
}

/// Serialises with 17 significant digits per coordinate so that parsing
/// restores every `f64` bit-exactly. Output bytes depend only on the mesh.
pub fn mesh_to_json(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(64 * mesh.n_nodes() + 32 * mesh.n_triangles());
    s.push_str("{\n  \"nodes\": [");
    for (i, p) in mesh.nodes.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "\n    [{:.16e}, {:.16e}]", p[0], p[1]);
    }
    s.push_str("\n  ],\n  \"triangles\": [");
    for (i, t) in mesh.triangles.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "\n    [{}, {}, {}]", t[0], t[1], t[2]);
    }
    s.push_str("\n  ],\n  \"sidesets\": {");
    for (i, (name, set)) in mesh.sidesets.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let nodes: Vec<String> = set.nodes.iter().map(|n| n.to_string()).collect();
        let _ = write!(
            s,
            "\n    {}: {{ \"label\": {}, \"nodes\": [{}] }}",
            serde_json::to_string(name).expect("string serialises"),
            set.label,
            nodes.join(", ")
        );
    }
    s.push_str("\n  }\n}\n");
    s
}

/// Parses and validates a mesh document.
pub fn mesh_from_json(text: &str) -> Result<Mesh> {
    let raw: RawMesh = serde_json::from_str(text).map_err(|e| MeshError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mesh = Mesh { nodes: raw.nodes, triangles: raw.triangles, sidesets: raw.sidesets };
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, mesh_to_json(mesh))
        .map_err(|e| MeshError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MeshError::Io { path: path.display().to_string(), message: e.to_string() })?;
    mesh_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_annulus_polygon, GeometrySpec};
    use proptest::prelude::*;

    fn annulus(rotation: f64) -> Mesh {
        generate_annulus_polygon(&GeometrySpec {
            n_sides: 3,
            poly_radius: 0.37,
            outer_radius: 1.0,
            rotation,
            radial_layers: 2,
            angular_resolution: 12,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = annulus(0.3);
        save_mesh(&m, &path).unwrap();
        assert_eq!(load_mesh(&path).unwrap(), m);
    }

    #[test]
    fn out_of_range_triangle_rejected() {
        let text = r#"{"nodes": [[0,0],[1,0],[0,1]], "triangles": [[0,1,3]],
            "sidesets": {"wall": {"label": 2, "nodes": [0,1,2]}}}"#;
        assert!(matches!(
            mesh_from_json(text),
            Err(MeshError::NodeOutOfRange { triangle: 0, node: 3, n_nodes: 3 })
        ));
    }

    #[test]
    fn overlapping_sidesets_rejected() {
        let text = r#"{"nodes": [[0,0],[1,0],[0,1]], "triangles": [[0,1,2]],
            "sidesets": {"wall": {"label": 2, "nodes": [0,1,2]}, "inlet": {"label": 3, "nodes": [2]}}}"#;
        assert!(matches!(mesh_from_json(text), Err(MeshError::OverlappingSidesets { node: 2, .. })));
    }

    #[test]
    fn malformed_json_reports_position() {
        let text = "{\n  \"nodes\": [[0, 0],\n  [1, oops]]\n}";
        match mesh_from_json(text) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let unknown = r#"{"nodes": [], "triangles": [], "sidesets": {}, "extra": 1}"#;
        assert!(matches!(mesh_from_json(unknown), Err(MeshError::Parse { .. })));
    }

    #[test]
    fn serialisation_is_deterministic() {
        assert_eq!(mesh_to_json(&annulus(0.1)), mesh_to_json(&annulus(0.1)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn coordinates_round_trip_bit_exact(rot in -10.0f64..10.0, scale in 1e-6f64..1e6) {
            let mut m = annulus(rot);
            for p in &mut m.nodes {
                p[0] *= scale;
                p[1] *= scale;
            }
            let back = mesh_from_json(&mesh_to_json(&m)).unwrap();
            for (a, b) in m.nodes.iter().zip(&back.nodes) {
                prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
                prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
            }
            prop_assert_eq!(back.triangles, m.triangles);
        }
    }
}
