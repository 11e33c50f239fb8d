use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use geonew::container::Container;
use geonew::data::{dirichlet_from_sidesets, single_sample, Split, SAMPLE_MAGIC};
use geonew::feec::assemble;
use geonew::geofeat::{compute_features, FeatureConfig, GeoFeatures};
use geonew::mesh::{generate_annulus_polygon, load_mesh, save_mesh, Mesh};
use geonew::model::GeoNew;
use geonew::reduced::DirichletData;
use geonew::train::{Prepared, Trainer};
use geonew::verify::{verify_model, VerifyOptions};
use geonew::DenseMatrix;
use serde_json::json;

use crate::config::{write_json, CaseConfig};
use crate::error::{numerical, NumericalExt};
use crate::{FeaturesArgs, SolveArgs, VerifyArgs};

/// Absolute tolerance of the feature invariance check.
const INVARIANCE_TOL: f64 = 1e-9;
/// Translation applied together with `--rotate`.
const TEST_TRANSLATION: [f64; 2] = [0.375, -1.25];

fn load_trainer(path: &Path) -> anyhow::Result<Trainer> {
    Trainer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn case_mesh(mesh: Option<&Path>, case: &CaseConfig) -> anyhow::Result<Mesh> {
    Ok(match mesh {
        Some(p) => load_mesh(p).with_context(|| format!("loading mesh {}", p.display()))?,
        None => generate_annulus_polygon(&case.geometry)?,
    })
}

fn rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn run_solve(args: &SolveArgs) -> anyhow::Result<()> {
    let mut case = CaseConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        case.geometry.seed = seed;
    }
    let trainer = args.checkpoint.as_deref().map(load_trainer).transpose()?;
    if let Some(t) = &trainer {
        if t.config.features != case.features {
            log::info!("using the checkpoint's feature configuration");
            case.features = t.config.features.clone();
        }
    }
    let split = if case.geometry.n_sides < 5 { Split::TestId } else { Split::TestOod };
    let sample = single_sample("case", split, &case.geometry, &case.boundary, case.forcing, &case.features).classify()?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("config.json"), &case)?;
    save_mesh(&sample.mesh, &args.out.join("mesh.json"))?;

    let mut fields = Container::new(json!({ "name": "case", "mesh": "mesh.json", "geometry": case.geometry }));
    fields.push("u_ref", sample.solution.clone());
    let mut report = json!({ "n_nodes": sample.mesh.n_nodes(), "n_triangles": sample.mesh.n_triangles() });
    let mut failure = None;
    if let Some(t) = &trainer {
        let prepared = Prepared::new(&sample).classify()?;
        let eval = t.evaluate(std::slice::from_ref(&prepared), split).classify()?;
        let e = &eval.samples[0];
        fields.push("u_pred", e.prediction.clone());
        report["model"] = json!({
            "eps_l2": e.eps_l2,
            "boundary_err": e.boundary_err,
            "converged": e.converged,
            "iterations": e.iterations,
            "residual_norm": e.residual_norm,
            "zeta": e.zeta,
        });
        println!("model: eps_l2 {:.4e}, boundary_err {:e}, newton iterations {}", e.eps_l2, e.boundary_err, e.iterations);
        if !e.converged {
            failure = Some("Newton did not converge".to_string());
        }
    }
    fs::write(args.out.join("solution.gnwd"), fields.encode(SAMPLE_MAGIC))?;
    write_json(&args.out.join("solve.json"), &report)?;
    println!("reference solution: {}", args.out.join("solution.gnwd").display());
    match failure {
        Some(m) => Err(numerical(m)),
        None => Ok(()),
    }
}

fn max_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

fn features_json(mesh: &Mesh, f: &GeoFeatures) -> anyhow::Result<serde_json::Value> {
    let boundary = mesh.boundary_mask()?;
    let boundary_sdf = (0..mesh.n_nodes()).filter(|&i| boundary[i]).map(|i| f.sdf[(i, 0)].abs()).fold(0.0, f64::max);
    Ok(json!({
        "schema": "geonew-features/1",
        "n_nodes": mesh.n_nodes(),
        "d_in": f.d_in(),
        "times": f.times,
        "columns": {
            "hks": f.hks.cols(),
            "hks_grad": f.hks_grad.cols(),
            "harmonic": f.harmonic.cols(),
            "sdf": f.sdf.cols(),
            "labels": f.labels.cols(),
        },
        "nodes": mesh.nodes,
        "boundary": boundary,
        "hks": rows(&f.hks),
        "hks_grad": rows(&f.hks_grad),
        "harmonic": rows(&f.harmonic),
        "sdf": f.sdf.column(0),
        "labels": rows(&f.labels),
        "matrix": rows(&f.matrix),
        "boundary_sdf_max": boundary_sdf,
    }))
}

fn features_of(mesh: &Mesh, cfg: &FeatureConfig) -> anyhow::Result<GeoFeatures> {
    let fine = assemble(mesh)?;
    compute_features(mesh, &fine, cfg).classify()
}

pub fn run_features(args: &FeaturesArgs) -> anyhow::Result<()> {
    let case = CaseConfig::load(args.config.as_deref())?;
    let mesh = case_mesh(args.mesh.as_deref(), &case)?;
    let f = features_of(&mesh, &case.features)?;
    let mut out = features_json(&mesh, &f)?;
    let mut failure = None;
    if let Some(deg) = args.rotate {
        let moved = mesh.transformed(deg.to_radians(), TEST_TRANSLATION);
        let g = features_of(&moved, &case.features)?;
        let hks = max_diff(&f.hks, &g.hks);
        let harmonic = max_diff(&f.harmonic, &g.harmonic);
        let sdf = max_diff(&f.sdf, &g.sdf);
        let pass = hks <= INVARIANCE_TOL && harmonic <= INVARIANCE_TOL && sdf <= INVARIANCE_TOL;
        out["invariance"] = json!({
            "rotate_deg": deg,
            "translation": TEST_TRANSLATION,
            "hks_max_diff": hks,
            "harmonic_max_diff": harmonic,
            "sdf_max_diff": sdf,
            "tol": INVARIANCE_TOL,
            "pass": pass,
        });
        println!("invariance: hks {hks:.3e}, harmonic {harmonic:.3e}, sdf {sdf:.3e} ({})", if pass { "pass" } else { "FAIL" });
        if !pass {
            failure = Some(format!("features changed under a rigid motion by more than {INVARIANCE_TOL:e}"));
        }
    } else {
        out["invariance"] = serde_json::Value::Null;
    }
    let path = args.out.join("features.json");
    write_json(&path, &out)?;
    println!("features: {} ({} nodes, {} columns)", path.display(), mesh.n_nodes(), f.d_in());
    match failure {
        Some(m) => Err(numerical(m)),
        None => Ok(()),
    }
}

fn dirichlet_data(mesh: &Mesh, values: &BTreeMap<String, f64>) -> anyhow::Result<DirichletData> {
    dirichlet_from_sidesets(mesh, values)?;
    let mut data = DirichletData::default();
    for (set, &v) in values {
        let s = mesh.sideset(set).with_context(|| format!("mesh has no sideset `{set}`"))?;
        data.values.insert(set.clone(), DenseMatrix::filled(s.nodes.len(), 1, v));
    }
    Ok(data)
}

pub fn run_verify(args: &VerifyArgs) -> anyhow::Result<()> {
    let mut case = CaseConfig::load(args.config.as_deref())?;
    let trainer = args.checkpoint.as_deref().map(load_trainer).transpose()?;
    if let Some(t) = &trainer {
        case.features = t.config.features.clone();
    }
    let mesh = case_mesh(args.mesh.as_deref(), &case)?;
    let fine = assemble(&mesh)?;
    let features = compute_features(&mesh, &fine, &case.features).classify()?.matrix;
    let boundary = dirichlet_data(&mesh, &case.boundary)?;
    let fresh;
    let model = match &trainer {
        Some(t) => &t.model,
        None => {
            fresh = GeoNew::new(case.model.clone(), features.cols()).classify()?;
            &fresh
        }
    };
    let opts = VerifyOptions { seed: args.seed.unwrap_or(0), ..VerifyOptions::default() };
    let report = verify_model(model, &mesh, &fine, features, &boundary, &opts).classify()?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = &args.out {
        write_json(&dir.join("verify.json"), &report)?;
    }
    if !report.pass {
        return Err(numerical(format!("failed checks: {}", report.failed().join(", "))));
    }
    Ok(())
}
