use geonew_demo::{features, model_solve, reference_solve, Request};
use serde_json::Value;

fn parse(text: String) -> Value {
    serde_json::from_str(&text).unwrap()
}

fn len(v: &Value, key: &str) -> usize {
    v[key].as_array().unwrap().len()
}

#[test]
fn empty_request_uses_defaults() {
    let r = Request::parse("  ").unwrap();
    assert_eq!(r.n_sides, 5);
    assert_eq!(r.geometry().angular_resolution % 5, 0);
    let r = Request::parse(r#"{"n_sides": 7, "resolution": 30}"#).unwrap();
    assert_eq!(r.geometry().angular_resolution, 35);
    assert!(Request::parse(r#"{"sides": 4}"#).unwrap_err().contains("unknown field"));
}

#[test]
fn feature_field_matches_mesh() {
    let f = parse(features(r#"{"n_sides": 4, "feature": "sdf"}"#).unwrap());
    let n = len(&f, "nodes");
    assert_eq!(len(&f, "field"), n);
    assert!(len(&f, "triangles") > 0);
    assert!(f["field"].as_array().unwrap().iter().all(|v| v.as_f64().unwrap() >= 0.0));
    assert!(features(r#"{"feature": "curvature"}"#).unwrap_err().contains("unknown feature"));
    assert!(features(r#"{"feature": "sdf", "column": 3}"#).unwrap_err().contains("columns"));
}

#[test]
fn reference_solve_respects_boundary_values() {
    let out = parse(reference_solve(r#"{"inner": 2.0, "outer": -1.0}"#).unwrap());
    let field: Vec<f64> = out["field"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Harmonic with constant boundary data: the maximum principle holds.
    assert!((hi - 2.0).abs() < 1e-12 && (lo + 1.0).abs() < 1e-12, "range [{lo}, {hi}]");
}

#[test]
fn untrained_model_is_exact_on_the_boundary() {
    let out = parse(model_solve(r#"{"n_sides": 6, "seed": 3}"#).unwrap());
    assert_eq!(out["boundary_err"], 0.0);
    assert_eq!(out["converged"], true);
    assert!(out["eps_l2"].as_f64().unwrap().is_finite());
    assert_eq!(len(&out, "field"), len(&out, "reference"));
    assert_eq!(model_solve(r#"{"n_sides": 6, "seed": 3}"#).unwrap(), out.to_string());
}
