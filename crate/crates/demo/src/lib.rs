//! Browser demo. Each operation takes a JSON request and returns a JSON
//! document with the mesh and nodal fields for the page to draw.
//!
//! The plain functions are usable natively; the `wasm_*` wrappers are the
//! exported browser entry points.

use std::collections::BTreeMap;

use geonew::data::{single_sample, Split};
use geonew::feec::assemble;
use geonew::geofeat::{compute_features, FeatureConfig, GeoFeatures};
use geonew::mesh::{generate_annulus_polygon, GeometrySpec, Mesh};
use geonew::train::{Prepared, TrainConfig, Trainer};
use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Page controls. Missing fields fall back to the defaults below.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Request {
    pub n_sides: usize,
    pub poly_radius: f64,
    /// Polygon rotation in degrees.
    pub rotation_deg: f64,
    /// Target number of nodes per ring; rounded up to a multiple of `n_sides`.
    pub resolution: usize,
    pub radial_layers: usize,
    pub inner: f64,
    pub outer: f64,
    pub forcing: f64,
    /// `hks`, `hks_grad`, `harmonic`, `sdf` or `labels`.
    pub feature: String,
    pub column: usize,
    pub seed: u64,
}

impl Default for Request {
    fn default() -> Self {
        Self {
            n_sides: 5,
            poly_radius: 0.4,
            rotation_deg: 0.0,
            resolution: 30,
            radial_layers: 4,
            inner: 1.0,
            outer: 0.0,
            forcing: 0.0,
            feature: "hks".into(),
            column: 0,
            seed: 0,
        }
    }
}

impl Request {
    pub fn parse(text: &str) -> Result<Self, String> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| format!("bad request: {e}"))
    }

    pub fn geometry(&self) -> GeometrySpec {
        let n = self.n_sides.max(1);
        GeometrySpec {
            n_sides: self.n_sides,
            poly_radius: self.poly_radius,
            outer_radius: 1.0,
            rotation: self.rotation_deg.to_radians(),
            radial_layers: self.radial_layers,
            angular_resolution: self.resolution.div_ceil(n).max(1) * n,
            seed: self.seed,
        }
    }

    fn boundary(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("inner".to_string(), self.inner), ("outer".to_string(), self.outer)])
    }

    fn split(&self) -> Split {
        if self.n_sides <= 5 {
            Split::TestId
        } else {
            Split::TestOod
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mesh_json(mesh: &Mesh) -> Value {
    json!({ "nodes": mesh.nodes, "triangles": mesh.triangles })
}

fn column(f: &GeoFeatures, name: &str, col: usize) -> Result<Vec<f64>, String> {
    let m = match name {
        "hks" => &f.hks,
        "hks_grad" => &f.hks_grad,
        "harmonic" => &f.harmonic,
        "sdf" => &f.sdf,
        "labels" => &f.labels,
        other => return Err(format!("unknown feature `{other}`")),
    };
    if col >= m.cols() {
        return Err(format!("feature `{name}` has {} columns, asked for column {col}", m.cols()));
    }
    Ok(m.column(col))
}

/// Geometry feature field on a freshly meshed annulus.
pub fn features(request: &str) -> Result<String, String> {
    let req = Request::parse(request)?;
    let mesh = generate_annulus_polygon(&req.geometry()).map_err(err)?;
    let fine = assemble(&mesh).map_err(err)?;
    let f = compute_features(&mesh, &fine, &FeatureConfig::default()).map_err(err)?;
    let values = column(&f, &req.feature, req.column)?;
    let mut out = mesh_json(&mesh);
    out["field"] = json!(values);
    out["columns"] = json!({
        "hks": f.hks.cols(),
        "hks_grad": f.hks_grad.cols(),
        "harmonic": f.harmonic.cols(),
        "sdf": f.sdf.cols(),
        "labels": f.labels.cols(),
    });
    out["times"] = json!(f.times);
    Ok(out.to_string())
}

/// Reference finite-element solve of `-Δu = f` with constant boundary values.
pub fn reference_solve(request: &str) -> Result<String, String> {
    let req = Request::parse(request)?;
    let sample = single_sample("demo", req.split(), &req.geometry(), &req.boundary(), req.forcing, &FeatureConfig::default())
        .map_err(err)?;
    let mut out = mesh_json(&sample.mesh);
    out["field"] = json!(sample.solution.column(0));
    Ok(out.to_string())
}

/// Newton solve with a freshly initialised (untrained) model, compared with
/// the reference solution.
pub fn model_solve(request: &str) -> Result<String, String> {
    let req = Request::parse(request)?;
    let sample = single_sample("demo", req.split(), &req.geometry(), &req.boundary(), req.forcing, &FeatureConfig::default())
        .map_err(err)?;
    let prepared = Prepared::new(&sample).map_err(err)?;
    let config = TrainConfig { seed: req.seed, ..TrainConfig::default() };
    let trainer = Trainer::new(config, sample.features.cols()).map_err(err)?;
    let eval = trainer.evaluate(std::slice::from_ref(&prepared), req.split()).map_err(err)?;
    let e = &eval.samples[0];
    let mut out = mesh_json(&sample.mesh);
    out["field"] = json!(e.prediction.column(0));
    out["reference"] = json!(sample.solution.column(0));
    out["eps_l2"] = json!(e.eps_l2);
    out["boundary_err"] = json!(e.boundary_err);
    out["converged"] = json!(e.converged);
    out["iterations"] = json!(e.iterations);
    out["zeta"] = json!(e.zeta);
    Ok(out.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = features)]
pub fn wasm_features(request: &str) -> Result<String, JsError> {
    js(features(request))
}

#[wasm_bindgen(js_name = referenceSolve)]
pub fn wasm_reference_solve(request: &str) -> Result<String, JsError> {
    js(reference_solve(request))
}

#[wasm_bindgen(js_name = modelSolve)]
pub fn wasm_model_solve(request: &str) -> Result<String, JsError> {
    js(model_solve(request))
}
