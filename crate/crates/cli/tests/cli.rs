use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geonew::container::Container;
use geonew::data::SAMPLE_MAGIC;
use geonew::train::METRICS_HEADER;
use serde_json::Value;

fn geonew(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geonew"))
        .args(args)
        .current_dir(dir)
        .env("GEONEW_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const DATASET: &str = r#"{"seed": 3,
  "train": {"count": 8, "n_sides": [3, 4]},
  "test_id": {"count": 2, "n_sides": [3, 4]},
  "test_ood": {"count": 2, "n_sides": [6, 8]}}"#;

fn generate(dir: &Path) {
    fs::write(dir.join("ds.json"), DATASET).unwrap();
    ok(&geonew(&["generate", "--config", "ds.json", "--out", "data"], dir));
}

fn sha_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.starts_with("sha256: ")).unwrap().to_string()
}

#[test]
fn generate_is_deterministic_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ds.json"), DATASET).unwrap();
    let a = ok(&geonew(&["generate", "--config", "ds.json", "--out", "a"], dir.path()));
    let b = ok(&geonew(&["generate", "--config", "ds.json", "--out", "b"], dir.path()));
    let c = ok(&geonew(&["generate", "--config", "ds.json", "--out", "c", "--seed", "4"], dir.path()));
    assert_eq!(sha_line(&a), sha_line(&b));
    assert_ne!(sha_line(&a), sha_line(&c));
    for line in ["train: 8", "test_id: 2", "test_ood: 2", "manifest: a/manifest.json"] {
        assert!(a.lines().any(|l| l == line), "missing `{line}` in\n{a}");
    }
    assert_eq!(read_json(&dir.path().join("c/config.json"))["seed"], 4);
    let manifest = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 12);
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let out = geonew(&["generate", "--config", "bad.json", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `colour`"));
    assert!(!d.join("x/manifest.json").exists());

    // n = 6 is not allowed in the in-distribution training split.
    fs::write(d.join("ood.json"), r#"{"train": {"count": 2, "n_sides": [6]}}"#).unwrap();
    assert_eq!(geonew(&["generate", "--config", "ood.json", "--out", "y"], d).status.code(), Some(1));

    fs::write(d.join("run.json"), r#"{"dataset": "m.json", "train": {"epochs": 1, "learning_rate": 1}}"#).unwrap();
    let out = geonew(&["train", "--config", "run.json", "--out", "r"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    assert_eq!(geonew(&["eval", "--split", "validation"], d).status.code(), Some(1));
    assert_eq!(geonew(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(geonew(&["--help"], d).status.code(), Some(0));
}

#[test]
fn smoke_train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    fs::write(
        d.join("run.json"),
        r#"{"dataset": "data/manifest.json", "train": {"epochs": 2, "batch_size": 4, "checkpoint_every": 1}}"#,
    )
    .unwrap();
    ok(&geonew(&["train", "--config", "run.json", "--out", "run", "--seed", "5"], d));

    let csv = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    let splits: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(cols.len(), 9);
            (cols[0], cols[1])
        })
        .collect();
    assert_eq!(splits, vec![("0", "train"), ("1", "train"), ("2", "test_id"), ("2", "test_ood")]);
    for l in &lines[1..] {
        assert_eq!(l.split(',').nth(3), Some("0"), "boundary error in `{l}`");
    }
    assert_eq!(read_json(&d.join("run/config.json"))["train"]["seed"], 5);
    let summary = read_json(&d.join("run/summary.json"));
    assert_eq!(summary["step"], 4);

    // Resuming from the first-epoch checkpoint redoes epoch 1 only and lands on
    // the same final state.
    ok(&geonew(&["train", "--config", "run.json", "--out", "resumed", "--resume", "run/checkpoints/epoch_0001.gnwc"], d));
    let csv = fs::read_to_string(d.join("resumed/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("1,train,"));
    assert_eq!(read_json(&d.join("resumed/summary.json"))["step"], 4);
    assert_eq!(fs::read(d.join("run/checkpoint.gnwc")).unwrap(), fs::read(d.join("resumed/checkpoint.gnwc")).unwrap());

    let stdout = ok(&geonew(
        &["eval", "--checkpoint", "run/checkpoint.gnwc", "--dataset", "data/manifest.json", "--split", "test_ood", "--out", "ev"],
        d,
    ));
    assert!(stdout.starts_with("test_ood: 2 samples"));
    let report = read_json(&d.join("ev/eval.json"));
    let samples = report["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 2);
    for s in samples {
        assert!(s["n_sides"].as_u64().unwrap() > 5);
        assert_eq!(s["boundary_err"], 0.0);
        let name = s["name"].as_str().unwrap();
        assert!(name.starts_with("test_ood_"));
        let dump = Container::decode(&fs::read(d.join(format!("ev/fields/{name}.gnwd"))).unwrap(), SAMPLE_MAGIC).unwrap();
        let (pred, reference) = (dump.get("u_pred").unwrap(), dump.get("u_ref").unwrap());
        assert_eq!(pred.shape(), reference.shape());
        assert_eq!(dump.meta["eps_l2"], s["eps_l2"]);
    }
    let eval_csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    // Same checkpoint, same split: the eval row matches the end-of-training row.
    let last_train = lines.last().unwrap().split(',').take(6).collect::<Vec<_>>();
    let eval_row = eval_csv.lines().nth(1).unwrap().split(',').take(6).collect::<Vec<_>>();
    assert_eq!(last_train, eval_row);

    let out = ok(&geonew(&["solve", "--checkpoint", "run/checkpoint.gnwc", "--out", "sol"], d));
    assert!(out.contains("boundary_err 0e0"));
    let sol = Container::decode(&fs::read(d.join("sol/solution.gnwd")).unwrap(), SAMPLE_MAGIC).unwrap();
    assert!(sol.get("u_pred").is_some() && sol.get("u_ref").is_some());
    let verify = geonew(&["verify", "--checkpoint", "run/checkpoint.gnwc"], d);
    let report: Value = serde_json::from_slice(&verify.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(verify.status.code(), Some(0));
}

#[test]
fn unconverged_solves_exit_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    fs::write(
        d.join("run.json"),
        r#"{"dataset": "data/manifest.json",
            "train": {"epochs": 1, "batch_size": 4, "solve": {"tol": 1e-300, "max_iter": 1}}}"#,
    )
    .unwrap();
    let out = geonew(&["train", "--config", "run.json", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical failure"));
    let csv = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("0,train,NaN,0,0,"));
}

#[test]
fn features_dump_schema_and_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&geonew(&["features", "--rotate", "73", "--out", "f"], d));
    assert!(out.contains("(pass)"));
    let f = read_json(&d.join("f/features.json"));
    let keys: Vec<&str> = f.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = vec![
        "boundary", "boundary_sdf_max", "columns", "d_in", "harmonic", "hks", "hks_grad", "invariance", "labels", "matrix",
        "n_nodes", "nodes", "schema", "sdf", "times",
    ];
    expected.sort();
    assert_eq!(keys, expected);
    assert_eq!(f["schema"], "geonew-features/1");
    let n = f["n_nodes"].as_u64().unwrap() as usize;
    assert_eq!(f["matrix"].as_array().unwrap().len(), n);
    assert_eq!(f["matrix"][0].as_array().unwrap().len() as u64, f["d_in"].as_u64().unwrap());
    let boundary = f["boundary"].as_array().unwrap();
    let sdf = f["sdf"].as_array().unwrap();
    for (b, s) in boundary.iter().zip(sdf) {
        if b.as_bool().unwrap() {
            assert_eq!(s.as_f64().unwrap(), 0.0);
        } else {
            assert!(s.as_f64().unwrap() > 0.0);
        }
    }
    assert_eq!(f["invariance"]["pass"], true);
    assert!(f["invariance"]["hks_max_diff"].as_f64().unwrap() <= 1e-9);

    // A mesh file works as input too; without --rotate there is no check.
    fs::write(d.join("case.json"), r#"{"geometry": {"n_sides": 6, "poly_radius": 0.45, "outer_radius": 1.0,
        "rotation": 0.1, "radial_layers": 2, "angular_resolution": 18, "seed": 2}}"#)
    .unwrap();
    ok(&geonew(&["solve", "--config", "case.json", "--out", "s"], d));
    ok(&geonew(&["features", "--mesh", "s/mesh.json", "--out", "g"], d));
    assert_eq!(read_json(&d.join("g/features.json"))["invariance"], Value::Null);
}

#[test]
fn verify_reports_machine_readable_checks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = geonew(&["verify", "--out", "v"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&d.join("v/verify.json"));
    assert_eq!(report["pass"], true);
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for name in ["partition_of_unity", "projection_identity", "conservation", "dirichlet_exactness", "lipschitz_empirical", "tau"] {
        assert!(names.contains(&name), "missing check {name}");
    }
    assert!(report["tau"].as_f64().unwrap() < 1.0);

    fs::write(d.join("case.json"), r#"{"boundary": {"inner": 1.0}}"#).unwrap();
    assert_eq!(geonew(&["verify", "--config", "case.json"], d).status.code(), Some(1));
}
