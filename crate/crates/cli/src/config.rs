use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use geonew::geofeat::FeatureConfig;
use geonew::mesh::GeometrySpec;
use geonew::model::ModelConfig;
use geonew::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads a JSON config. Unknown keys are rejected by the target types, and
/// serde names the offending key in the message.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `train` run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Dataset manifest, relative to the config file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

impl TrainRunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: Self = load_json(path)?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }
}

/// Single-geometry configuration for `solve`, `features` and `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaseConfig {
    pub geometry: GeometrySpec,
    /// Constant Dirichlet value per sideset.
    pub boundary: BTreeMap<String, f64>,
    pub forcing: f64,
    pub features: FeatureConfig,
    /// Model used by `verify` when no checkpoint is given.
    pub model: ModelConfig,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            geometry: GeometrySpec {
                n_sides: 4,
                poly_radius: 0.4,
                outer_radius: 1.0,
                rotation: 0.0,
                radial_layers: 3,
                angular_resolution: 24,
                seed: 0,
            },
            boundary: BTreeMap::from([("inner".to_string(), 1.0), ("outer".to_string(), 0.0)]),
            forcing: 0.0,
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl CaseConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => load_json(p),
            None => Ok(Self::default()),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
