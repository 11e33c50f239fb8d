//! Poly-Poisson dataset: reference P1 solver, sample files, manifest and the
//! on-disk feature cache.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::feec::{assemble, FeecError, FineOperators};
use crate::geofeat::{compute_features, FeatureConfig, GeofeatError};
use crate::linalg::{Cholesky, DenseMatrix, LinalgError};
use crate::mesh::{generate_annulus_polygon, mesh_from_json, mesh_to_json, GeometrySpec, Mesh, MeshError};
use crate::model::SampleContext;
use crate::nn::module_rng;
use crate::reduced::{BoundaryLayout, DirichletData, ReducedError};

pub const SAMPLE_MAGIC: &[u8; 4] = b"GNWD";
pub const FEATURE_MAGIC: &[u8; 4] = b"GNWF";
pub const MANIFEST_VERSION: u32 = 1;
/// Residual bound a stored solution must meet when reloaded.
pub const LOAD_RESIDUAL_TOL: f64 = 1e-8;
/// Residual bound the reference solver guarantees.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("boundary node {0} has no Dirichlet value")]
    MissingDirichlet(usize),
    #[error("system has no interior nodes")]
    EmptyInterior,
    #[error("dirichlet vector has {got} entries, mesh has {expected} nodes")]
    Dimension { expected: usize, got: usize },
    #[error("reference residual {residual:e} exceeds {tol:e} for sample `{sample}`")]
    Residual { sample: String, residual: f64, tol: f64 },
    #[error("malformed sample `{sample}`: {message}")]
    Sample { sample: String, message: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Feec(#[from] FeecError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Geofeat(#[from] GeofeatError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Per-node Dirichlet values from constant sideset values. Every boundary
/// node must be covered.
pub fn dirichlet_from_sidesets(mesh: &Mesh, values: &BTreeMap<String, f64>) -> Result<Vec<Option<f64>>> {
    let mut out = vec![None; mesh.n_nodes()];
    for (name, &v) in values {
        let set = mesh
            .sideset(name)
            .ok_or_else(|| DataError::Config(format!("sideset `{name}` does not exist")))?;
        for &node in &set.nodes {
            out[node] = Some(v);
        }
    }
    let boundary = mesh.boundary_mask()?;
    if let Some(node) = (0..mesh.n_nodes()).find(|&i| boundary[i] && out[i].is_none()) {
        return Err(DataError::MissingDirichlet(node));
    }
    Ok(out)
}

/// `(node, values per field)` for every node of every sideset in `data`.
pub fn dirichlet_values(mesh: &Mesh, data: &DirichletData) -> Vec<(usize, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, vals) in &data.values {
        if let Some(set) = mesh.sideset(name) {
            for (k, &node) in set.nodes.iter().enumerate() {
                out.push((node, vals.row(k).to_vec()));
            }
        }
    }
    out
}

/// P1 load vector `M f` for a nodal forcing.
fn load_vector(fine: &FineOperators, f: &[f64]) -> Result<Vec<f64>> {
    Ok(fine.m0.matvec(f)?)
}

/// Solves `-Δu = f` with P1 elements: `K_II u_I = (M f)_I − K_IB u_B`.
/// `f` is nodal; `dirichlet` fixes every boundary node.
pub fn reference_poisson_solve(mesh: &Mesh, fine: &FineOperators, f: &[f64], dirichlet: &[Option<f64>]) -> Result<Vec<f64>> {
    let n = mesh.n_nodes();
    for len in [f.len(), dirichlet.len()] {
        if len != n {
            return Err(DataError::Dimension { expected: n, got: len });
        }
    }
    let boundary = mesh.boundary_mask()?;
    if let Some(node) = (0..n).find(|&i| boundary[i] && dirichlet[i].is_none()) {
        return Err(DataError::MissingDirichlet(node));
    }
    let free: Vec<usize> = (0..n).filter(|&i| dirichlet[i].is_none()).collect();
    if free.is_empty() {
        return Err(DataError::EmptyInterior);
    }
    let mut u: Vec<f64> = dirichlet.iter().map(|d| d.unwrap_or(0.0)).collect();
    let load = load_vector(fine, f)?;
    let k = fine.k.to_dense();
    let k_ff = k.submatrix(&free, &free);
    let chol = Cholesky::factor(&k_ff)?;
    // One step of iterative refinement keeps the residual at roundoff level
    // on the larger convergence-study meshes.
    for _ in 0..2 {
        let ku = fine.k.matvec(&u)?;
        let r: Vec<f64> = free.iter().map(|&i| load[i] - ku[i]).collect();
        let du = chol.solve_vec(&r);
        for (&i, d) in free.iter().zip(du) {
            u[i] += d;
        }
    }
    Ok(u)
}

/// Max-norm residual `|(K u − M f)_i|` over rows without Dirichlet data.
pub fn reference_residual(fine: &FineOperators, f: &[f64], dirichlet: &[Option<f64>], u: &[f64]) -> Result<f64> {
    let ku = fine.k.matvec(u)?;
    let load = load_vector(fine, f)?;
    let mut r = 0.0f64;
    for i in 0..u.len() {
        match dirichlet[i] {
            None => r = r.max((ku[i] - load[i]).abs()),
            Some(v) => r = r.max((u[i] - v).abs()),
        }
    }
    Ok(r)
}

/// `‖u − u_h‖_{L2}` with the edge-midpoint rule on each triangle.
pub fn l2_error(mesh: &Mesh, u_h: &[f64], exact: impl Fn([f64; 2]) -> f64) -> f64 {
    let mut acc = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.signed_area(t).abs();
        for i in 0..3 {
            let (a, b) = (tri[i], tri[(i + 1) % 3]);
            let p = [0.5 * (mesh.nodes[a][0] + mesh.nodes[b][0]), 0.5 * (mesh.nodes[a][1] + mesh.nodes[b][1])];
            let e = exact(p) - 0.5 * (u_h[a] + u_h[b]);
            acc += area / 3.0 * e * e;
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestId, Split::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| DataError::Config(format!("unknown split `{s}` (expected train, test_id or test_ood)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub count: usize,
    /// Polygon side counts, drawn uniformly per sample.
    pub n_sides: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub inner: f64,
    pub outer: f64,
    /// When set, each sideset value is multiplied by a factor drawn
    /// uniformly from this range.
    pub amplitude: Option<[f64; 2]>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self { inner: 1.0, outer: 0.0, amplitude: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: SplitConfig,
    pub test_id: SplitConfig,
    pub test_ood: SplitConfig,
    pub poly_radius: [f64; 2],
    pub outer_radius: f64,
    pub radial_layers: usize,
    pub angular_resolution: usize,
    pub boundary: BoundaryConfig,
    /// Constant source term.
    pub forcing: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: SplitConfig { count: 200, n_sides: vec![3, 4] },
            test_id: SplitConfig { count: 50, n_sides: vec![3, 4] },
            test_ood: SplitConfig { count: 50, n_sides: vec![6, 8] },
            poly_radius: [0.3, 0.5],
            outer_radius: 1.0,
            radial_layers: 3,
            angular_resolution: 24,
            boundary: BoundaryConfig::default(),
            forcing: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn split(&self, split: Split) -> &SplitConfig {
        match split {
            Split::Train => &self.train,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        for split in Split::ALL {
            let sc = self.split(split);
            if sc.count > 0 && sc.n_sides.is_empty() {
                return bad(format!("{split}: n_sides is empty"));
            }
            for &n in &sc.n_sides {
                if n < 3 {
                    return bad(format!("{split}: n_sides {n} is not a polygon"));
                }
                let ok = match split {
                    Split::Train | Split::TestId => n < 5,
                    Split::TestOod => n > 5,
                };
                if !ok {
                    let rule = if split == Split::TestOod { "> 5" } else { "< 5" };
                    return bad(format!("{split}: n_sides {n} violates the n {rule} rule"));
                }
                if self.angular_resolution % n != 0 {
                    return bad(format!("angular_resolution {} is not a multiple of n_sides {n}", self.angular_resolution));
                }
            }
        }
        let [lo, hi] = self.poly_radius;
        if !(lo > 0.0 && lo <= hi && hi < self.outer_radius) {
            return bad(format!("poly_radius range [{lo}, {hi}] must satisfy 0 < lo <= hi < outer_radius"));
        }
        if let Some([a, b]) = self.boundary.amplitude {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return bad(format!("amplitude range [{a}, {b}] is invalid"));
            }
        }
        if !self.forcing.is_finite() || !self.boundary.inner.is_finite() || !self.boundary.outer.is_finite() {
            return bad("boundary values and forcing must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub name: String,
    pub split: Split,
    pub n_sides: usize,
    /// Sample file, relative to the manifest directory.
    pub file: String,
    /// Mesh JSON, relative to the manifest directory.
    pub mesh: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub samples: Vec<SampleEntry>,
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.splits.get(&split).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported format version {}", self.format_version)));
        }
        let mut seen = BTreeMap::new();
        for s in &self.samples {
            if seen.insert(s.name.as_str(), s.split).is_some() {
                return Err(DataError::Manifest(format!("duplicate sample `{}`", s.name)));
            }
            let ok = match s.split {
                Split::Train | Split::TestId => s.n_sides < 5,
                Split::TestOod => s.n_sides > 5,
            };
            if !ok {
                return Err(DataError::Manifest(format!("sample `{}` with n_sides {} in {}", s.name, s.n_sides, s.split)));
            }
        }
        for (split, names) in &self.splits {
            for name in names {
                if seen.get(name.as_str()) != Some(split) {
                    return Err(DataError::Manifest(format!("split {split} lists `{name}` inconsistently")));
                }
            }
        }
        let listed: usize = self.splits.values().map(Vec::len).sum();
        if listed != self.samples.len() {
            return Err(DataError::Manifest("splits do not cover every sample exactly once".into()));
        }
        Ok(())
    }
}

/// One generated sample before it is written.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub entry: SampleEntry,
    pub geometry: GeometrySpec,
    pub mesh: Mesh,
    pub boundary: BTreeMap<String, f64>,
    pub solution: Vec<f64>,
    pub residual: f64,
}

fn generate_sample(config: &DatasetConfig, split: Split, index: usize) -> Result<GeneratedSample> {
    let name = format!("{split}_{index:04}");
    let mut rng = module_rng(config.seed, &format!("sample/{name}"));
    let sc = config.split(split);
    let n_sides = sc.n_sides[rng.random_range(0..sc.n_sides.len())];
    let [lo, hi] = config.poly_radius;
    let poly_radius = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let rotation = rng.random_range(0.0..std::f64::consts::TAU / n_sides as f64);
    let geometry = GeometrySpec {
        n_sides,
        poly_radius,
        outer_radius: config.outer_radius,
        rotation,
        radial_layers: config.radial_layers,
        angular_resolution: config.angular_resolution,
        seed: rng.random(),
    };
    let mesh = generate_annulus_polygon(&geometry)?;
    let fine = assemble(&mesh)?;
    let mut boundary = BTreeMap::new();
    for (set, base) in [("inner", config.boundary.inner), ("outer", config.boundary.outer)] {
        let amp = match config.boundary.amplitude {
            Some([a, b]) if b > a => rng.random_range(a..b),
            Some([a, _]) => a,
            None => 1.0,
        };
        boundary.insert(set.to_string(), base * amp);
    }
    let dirichlet = dirichlet_from_sidesets(&mesh, &boundary)?;
    let f = vec![config.forcing; mesh.n_nodes()];
    let solution = reference_poisson_solve(&mesh, &fine, &f, &dirichlet)?;
    let residual = reference_residual(&fine, &f, &dirichlet, &solution)?;
    if residual > SOLVE_RESIDUAL_TOL {
        return Err(DataError::Residual { sample: name, residual, tol: SOLVE_RESIDUAL_TOL });
    }
    let entry = SampleEntry {
        file: format!("samples/{name}.gnwd"),
        mesh: format!("meshes/{name}.json"),
        name,
        split,
        n_sides,
    };
    Ok(GeneratedSample { entry, geometry, mesh, boundary, solution, residual })
}

fn sample_container(s: &GeneratedSample, forcing: f64) -> Container {
    let mut c = Container::new(json!({
        "name": s.entry.name,
        "split": s.entry.split,
        "mesh": s.entry.mesh,
        "geometry": s.geometry,
        "fields": ["u"],
        "forcing": forcing,
        "boundary": s.boundary,
        "reference_residual": s.residual,
    }));
    c.push("u", DenseMatrix::column_vector(&s.solution));
    for (name, &v) in &s.boundary {
        let m = s.mesh.sideset(name).map_or(0, |set| set.nodes.len());
        c.push(format!("boundary/{name}"), DenseMatrix::filled(m, 1, v));
    }
    c
}

/// Generates every sample of `config` and writes the dataset under `out`.
/// Output is byte-identical for identical configurations.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let jobs: Vec<(Split, usize)> =
        Split::ALL.into_iter().flat_map(|sp| (0..config.split(sp).count).map(move |i| (sp, i))).collect();
    #[cfg(feature = "parallel")]
    let generated: Vec<Result<GeneratedSample>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(sp, i)| generate_sample(config, sp, i)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let generated: Vec<Result<GeneratedSample>> = jobs.iter().map(|&(sp, i)| generate_sample(config, sp, i)).collect();

    let mut samples = Vec::with_capacity(generated.len());
    let mut splits: BTreeMap<Split, Vec<String>> = Split::ALL.into_iter().map(|s| (s, Vec::new())).collect();
    for g in generated {
        let g = g?;
        write(&out.join(&g.entry.mesh), mesh_to_json(&g.mesh).as_bytes())?;
        write(&out.join(&g.entry.file), &sample_container(&g, config.forcing).encode(SAMPLE_MAGIC))?;
        splits.get_mut(&g.entry.split).expect("all splits present").push(g.entry.name.clone());
        samples.push(g.entry);
    }
    let manifest = DatasetManifest { format_version: MANIFEST_VERSION, config: config.clone(), samples, splits };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), text.as_bytes())?;
    log::info!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read(path)?;
    let m: DatasetManifest = serde_json::from_slice(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

/// A loaded sample with its operators and features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub split: Split,
    pub n_sides: usize,
    pub geometry: GeometrySpec,
    pub mesh: Mesh,
    pub fine: FineOperators,
    pub features: DenseMatrix,
    pub boundary: DirichletData,
    /// Reference solution, `N × F`.
    pub solution: DenseMatrix,
    pub forcing: f64,
}

impl Sample {
    pub fn context(&self) -> Result<SampleContext> {
        let layout = BoundaryLayout::new(&self.mesh, &self.boundary)?;
        Ok(SampleContext::new(&self.fine, self.features.clone(), layout))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    /// Entries present but failing the hash check.
    pub corrupted: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// In manifest order.
    pub samples: Vec<Sample>,
    pub cache: CacheStats,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn d_in(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.cols())
    }
}

/// Cache key: hash of the mesh file contents and the feature configuration.
pub fn feature_cache_key(mesh_json: &[u8], config: &FeatureConfig) -> String {
    let mut h = Sha256::new();
    h.update(b"geonew-features-v1\0");
    h.update(mesh_json);
    h.update(serde_json::to_vec(config).expect("config serializes"));
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_matrix(m: &DenseMatrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        h.update(x.to_le_bytes());
    }
    hex(&h.finalize())
}

enum CacheLookup {
    Hit(DenseMatrix),
    Miss,
    Corrupt(String),
}

fn cache_lookup(path: &Path, key: &str) -> CacheLookup {
    let Ok(bytes) = fs::read(path) else {
        return CacheLookup::Miss;
    };
    let c = match Container::decode(&bytes, FEATURE_MAGIC) {
        Ok(c) => c,
        Err(e) => return CacheLookup::Corrupt(e.to_string()),
    };
    let Some(m) = c.get("features") else {
        return CacheLookup::Corrupt("no features array".into());
    };
    if c.meta["key"] != key {
        return CacheLookup::Corrupt("key mismatch".into());
    }
    if c.meta["digest"] != digest_matrix(m).as_str() {
        return CacheLookup::Corrupt("content hash mismatch".into());
    }
    CacheLookup::Hit(m.clone())
}

/// Meshes `geometry`, solves the reference problem with constant data on each
/// sideset and computes features, without touching the disk.
pub fn single_sample(
    name: &str,
    split: Split,
    geometry: &GeometrySpec,
    boundary: &BTreeMap<String, f64>,
    forcing: f64,
    features: &FeatureConfig,
) -> Result<Sample> {
    let mesh = generate_annulus_polygon(geometry)?;
    let fine = assemble(&mesh)?;
    let dirichlet = dirichlet_from_sidesets(&mesh, boundary)?;
    let f = vec![forcing; mesh.n_nodes()];
    let solution = reference_poisson_solve(&mesh, &fine, &f, &dirichlet)?;
    let residual = reference_residual(&fine, &f, &dirichlet, &solution)?;
    if residual > SOLVE_RESIDUAL_TOL {
        return Err(DataError::Residual { sample: name.to_string(), residual, tol: SOLVE_RESIDUAL_TOL });
    }
    let mut data = DirichletData::default();
    for (set, &v) in boundary {
        let m = mesh.sideset(set).map_or(0, |s| s.nodes.len());
        data.values.insert(set.clone(), DenseMatrix::filled(m, 1, v));
    }
    let features = compute_features(&mesh, &fine, features)?.matrix;
    Ok(Sample {
        name: name.to_string(),
        split,
        n_sides: geometry.n_sides,
        geometry: geometry.clone(),
        mesh,
        fine,
        features,
        boundary: data,
        solution: DenseMatrix::column_vector(&solution),
        forcing,
    })
}

/// Loads node features through the cache at `cache_dir`, recomputing and
/// rewriting entries that are missing or fail their hash check.
pub fn cached_features(
    mesh_json: &[u8],
    mesh: &Mesh,
    fine: &FineOperators,
    config: &FeatureConfig,
    cache_dir: &Path,
    stats: &mut CacheStats,
) -> Result<DenseMatrix> {
    let key = feature_cache_key(mesh_json, config);
    let path = cache_dir.join(format!("{key}.gnwf"));
    match cache_lookup(&path, &key) {
        CacheLookup::Hit(m) => {
            stats.hits += 1;
            return Ok(m);
        }
        CacheLookup::Miss => stats.misses += 1,
        CacheLookup::Corrupt(why) => {
            log::warn!("feature cache entry {} is invalid ({why}); recomputing", path.display());
            stats.corrupted += 1;
        }
    }
    let features = compute_features(mesh, fine, config)?.matrix;
    let mut c = Container::new(json!({ "key": key, "digest": digest_matrix(&features) }));
    c.push("features", features.clone());
    write(&path, &c.encode(FEATURE_MAGIC))?;
    Ok(features)
}

fn parse_sample(entry: &SampleEntry, bytes: &[u8], mesh: &Mesh) -> Result<(GeometrySpec, DirichletData, DenseMatrix, f64)> {
    let bad = |message: String| DataError::Sample { sample: entry.name.clone(), message };
    let c = Container::decode(bytes, SAMPLE_MAGIC)?;
    let geometry: GeometrySpec =
        serde_json::from_value(c.meta["geometry"].clone()).map_err(|e| bad(format!("geometry: {e}")))?;
    let forcing = c.meta["forcing"].as_f64().ok_or_else(|| bad("missing forcing".into()))?;
    let u = c.get("u").ok_or_else(|| bad("missing array `u`".into()))?.clone();
    if u.rows() != mesh.n_nodes() || !u.is_finite() {
        return Err(bad(format!("solution has shape {:?} for {} nodes or is not finite", u.shape(), mesh.n_nodes())));
    }
    let mut boundary = DirichletData::default();
    for (name, m) in &c.arrays {
        if let Some(set) = name.strip_prefix("boundary/") {
            let expected = mesh.sideset(set).map(|s| s.nodes.len());
            if expected != Some(m.rows()) {
                return Err(bad(format!("boundary data for `{set}` does not match the mesh")));
            }
            boundary.values.insert(set.to_string(), m.clone());
        }
    }
    Ok((geometry, boundary, u, forcing))
}

fn load_sample(root: &Path, entry: &SampleEntry, features: &FeatureConfig, stats: &mut CacheStats) -> Result<Sample> {
    let mesh_json = read(&root.join(&entry.mesh))?;
    let mesh = mesh_from_json(std::str::from_utf8(&mesh_json).map_err(|e| DataError::Sample {
        sample: entry.name.clone(),
        message: e.to_string(),
    })?)?;
    let (geometry, boundary, solution, forcing) = parse_sample(entry, &read(&root.join(&entry.file))?, &mesh)?;
    let fine = assemble(&mesh)?;

    let f = vec![forcing; mesh.n_nodes()];
    for col in 0..solution.cols() {
        let mut dirichlet = vec![None; mesh.n_nodes()];
        for (node, vals) in dirichlet_values(&mesh, &boundary) {
            dirichlet[node] = Some(vals[col]);
        }
        let residual = reference_residual(&fine, &f, &dirichlet, &solution.column(col))?;
        if residual > LOAD_RESIDUAL_TOL {
            return Err(DataError::Residual { sample: entry.name.clone(), residual, tol: LOAD_RESIDUAL_TOL });
        }
    }
    let features = cached_features(&mesh_json, &mesh, &fine, features, &root.join("cache"), stats)?;
    Ok(Sample {
        name: entry.name.clone(),
        split: entry.split,
        n_sides: entry.n_sides,
        geometry,
        mesh,
        fine,
        features,
        boundary,
        solution,
        forcing,
    })
}

/// Loads a dataset, re-verifying every stored solution against the reference
/// residual. `splits` restricts loading to the listed splits.
pub fn load_dataset(manifest_path: &Path, features: &FeatureConfig, splits: Option<&[Split]>) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut cache = CacheStats::default();
    let mut samples = Vec::new();
    for entry in &manifest.samples {
        if splits.is_some_and(|s| !s.contains(&entry.split)) {
            continue;
        }
        samples.push(load_sample(&root, entry, features, &mut cache)?);
    }
    log::info!(
        "loaded {} samples (feature cache: {} hits, {} misses, {} invalid)",
        samples.len(),
        cache.hits,
        cache.misses,
        cache.corrupted
    );
    Ok(Dataset { root, manifest, samples, cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{rectangle, DiagonalPattern};

    fn exact(p: [f64; 2]) -> f64 {
        p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1])
    }

    fn manufactured(n: usize) -> (Mesh, f64, f64) {
        let mesh = rectangle(n, n, 1.0, 1.0, DiagonalPattern::Uniform).unwrap();
        let fine = assemble(&mesh).unwrap();
        let f: Vec<f64> = mesh.nodes.iter().map(|p| 2.0 * (p[0] * (1.0 - p[0]) + p[1] * (1.0 - p[1]))).collect();
        let boundary = mesh.boundary_mask().unwrap();
        let dirichlet: Vec<Option<f64>> =
            mesh.nodes.iter().zip(&boundary).map(|(p, &b)| b.then(|| exact(*p))).collect();
        let u = reference_poisson_solve(&mesh, &fine, &f, &dirichlet).unwrap();
        let res = reference_residual(&fine, &f, &dirichlet, &u).unwrap();
        let err = l2_error(&mesh, &u, exact);
        (mesh, err, res)
    }

    #[test]
    fn manufactured_solution_converges_quadratically() {
        let errs: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| {
                let (_, e, r) = manufactured(n);
                assert!(r <= SOLVE_RESIDUAL_TOL, "residual {r:e}");
                e
            })
            .collect();
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate >= 1.8, "rate {rate} from {errs:?}");
        }
    }

    #[test]
    fn constant_data_gives_constant_solution() {
        let mesh = generate_annulus_polygon(&GeometrySpec {
            n_sides: 4,
            poly_radius: 0.4,
            outer_radius: 1.0,
            rotation: 0.2,
            radial_layers: 3,
            angular_resolution: 16,
            seed: 1,
        })
        .unwrap();
        let fine = assemble(&mesh).unwrap();
        let bc = BTreeMap::from([("inner".to_string(), 2.5), ("outer".to_string(), 2.5)]);
        let d = dirichlet_from_sidesets(&mesh, &bc).unwrap();
        let u = reference_poisson_solve(&mesh, &fine, &vec![0.0; mesh.n_nodes()], &d).unwrap();
        assert!(u.iter().all(|x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn reflected_problem_gives_reflected_solution() {
        // Unit square, diagonals mirrored about x = 1/2, data symmetric in x.
        let mesh = rectangle(10, 6, 1.0, 1.0, DiagonalPattern::Mirrored).unwrap();
        let fine = assemble(&mesh).unwrap();
        let g = |p: [f64; 2]| (p[0] - 0.5).powi(2) + p[1];
        let boundary = mesh.boundary_mask().unwrap();
        let d: Vec<Option<f64>> = mesh.nodes.iter().zip(&boundary).map(|(p, &b)| b.then(|| g(*p))).collect();
        let f = vec![1.0; mesh.n_nodes()];
        let u = reference_poisson_solve(&mesh, &fine, &f, &d).unwrap();
        let find = |q: [f64; 2]| {
            mesh.nodes.iter().position(|p| (p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12).unwrap()
        };
        for (i, p) in mesh.nodes.iter().enumerate() {
            let j = find([1.0 - p[0], p[1]]);
            assert!((u[i] - u[j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn missing_boundary_data_and_empty_interior_are_errors() {
        let mesh = rectangle(2, 2, 1.0, 1.0, DiagonalPattern::Uniform).unwrap();
        let fine = assemble(&mesh).unwrap();
        let n = mesh.n_nodes();
        assert!(matches!(
            reference_poisson_solve(&mesh, &fine, &vec![0.0; n], &vec![None; n]),
            Err(DataError::MissingDirichlet(_))
        ));
        assert!(matches!(
            reference_poisson_solve(&mesh, &fine, &vec![0.0; n], &vec![Some(0.0); n]),
            Err(DataError::EmptyInterior)
        ));
    }

    #[test]
    fn split_rules_are_validated() {
        let mut c = DatasetConfig::default();
        c.validate().unwrap();
        c.train.n_sides = vec![3, 6];
        assert!(matches!(c.validate(), Err(DataError::Config(m)) if m.contains("train")));
        let mut c = DatasetConfig::default();
        c.test_ood.n_sides = vec![4];
        assert!(c.validate().is_err());
        let mut c = DatasetConfig::default();
        c.angular_resolution = 20;
        assert!(c.validate().is_err());
        assert_eq!("test_ood".parse::<Split>().unwrap(), Split::TestOod);
        assert!("ood".parse::<Split>().is_err());
    }
}
