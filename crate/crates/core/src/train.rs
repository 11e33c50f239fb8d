//! Training loop: batched Newton solves, adjoint gradients, Adam with cosine
//! annealing, metrics and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::data::{DataError, Sample, Split};
use crate::flux::LipschitzBudget;
use crate::geofeat::FeatureConfig;
use crate::linalg::DenseMatrix;
use crate::model::{GeoNew, ModelConfig, ModelError, SampleContext};
use crate::nn::module_rng;
use crate::solver::{batch_accepted, batched_newton, newton_solve, random_init, SolveConfig, SolverError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNWC";
pub const METRICS_HEADER: &str = "epoch,split,eps_l2,boundary_err,conv_frac,mean_newton_iters,zeta,lr,seconds";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no samples to train on")]
    EmptyDataset,
    #[error("target norm is zero for sample {0}")]
    ZeroTarget(usize),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Mean over samples of `‖pred − target‖₂ / ‖target‖₂`.
pub fn normalized_l2(preds: &[DenseMatrix], targets: &[DenseMatrix]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(TrainError::Config(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut acc = 0.0;
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        acc += relative_l2(p, t).ok_or(TrainError::ZeroTarget(i))?;
    }
    Ok(acc / preds.len() as f64)
}

fn relative_l2(pred: &DenseMatrix, target: &DenseMatrix) -> Option<f64> {
    let norm = target.frobenius_norm();
    if norm == 0.0 || pred.shape() != target.shape() {
        return None;
    }
    Some(pred.sub(target).expect("shapes checked").frobenius_norm() / norm)
}

/// Cosine annealing from `max_lr` at step 0 to `min_lr` at `total - 1`.
pub fn cosine_lr(step: usize, total: usize, max_lr: f64, min_lr: f64) -> f64 {
    if total <= 1 {
        return max_lr;
    }
    let s = step.min(total - 1) as f64 / (total - 1) as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * s).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[DenseMatrix]) -> Self {
        let zeros: Vec<DenseMatrix> = params.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut [DenseMatrix], grads: &[DenseMatrix], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g) = (p.as_mut_slice(), g.as_slice());
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub solve: SolveConfig,
    pub budget: LipschitzBudget,
    pub adam: AdamConfig,
    /// Seed for shuffling, anchors and Newton initial states.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Evaluate the test splits every this many epochs; 0 only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            max_lr: 1e-3,
            min_lr: 1e-5,
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
            solve: SolveConfig::default(),
            budget: LipschitzBudget::default(),
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.max_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.max_lr) {
            return Err(TrainError::Config("learning rates must satisfy 0 < min_lr <= max_lr".into()));
        }
        if !(0.0..1.0).contains(&self.budget.decay) {
            return Err(TrainError::Config("budget decay must lie in [0, 1)".into()));
        }
        self.model.validate()?;
        self.solve.validate()?;
        if ![8, 16, 32].contains(&self.model.p_free) {
            log::warn!("p_free = {} is outside the usual sizes 8, 16, 32", self.model.p_free);
        }
        Ok(())
    }
}

/// A sample ready for the model: context plus target.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub split: Split,
    pub ctx: SampleContext,
    pub target: DenseMatrix,
}

impl Prepared {
    pub fn new(sample: &Sample) -> Result<Self> {
        if sample.solution.frobenius_norm() == 0.0 {
            return Err(TrainError::Config(format!("sample {} has an all-zero solution", sample.name)));
        }
        Ok(Self {
            name: sample.name.clone(),
            split: sample.split,
            ctx: sample.context()?,
            target: sample.solution.clone(),
        })
    }

    /// Largest error on Dirichlet nodes.
    pub fn boundary_error(&self, pred: &DenseMatrix) -> f64 {
        let mut err = 0.0f64;
        for (i, &d) in self.ctx.layout.dirichlet.iter().enumerate() {
            if d {
                for f in 0..pred.cols() {
                    err = err.max((pred[(i, f)] - self.target[(i, f)]).abs());
                }
            }
        }
        err
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub eps_l2: f64,
    pub boundary_err: f64,
    pub conv_frac: f64,
    pub mean_newton_iters: f64,
    pub zeta: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.eps_l2,
            self.boundary_err,
            self.conv_frac,
            self.mean_newton_iters,
            self.zeta,
            self.lr,
            self.seconds
        )
    }
}

/// Appends rows to a metrics CSV, writing the header into empty files.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    let empty = file.metadata().map_err(|e| io_err(path, e))?.len() == 0;
    let mut text = String::new();
    if empty {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Training statistics of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over converged samples of accepted batches.
    pub loss: f64,
    /// Normalized L2 over converged samples.
    pub eps_l2: f64,
    pub boundary_err: f64,
    pub conv_frac: f64,
    pub mean_newton_iters: f64,
    pub zeta: f64,
    pub lr: f64,
    pub seconds: f64,
    pub skipped_batches: usize,
    /// Parameter groups that received a nonzero gradient this epoch.
    pub nonzero_grads: Vec<bool>,
}

impl EpochStats {
    pub fn row(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            split: Split::Train,
            eps_l2: self.eps_l2,
            boundary_err: self.boundary_err,
            conv_frac: self.conv_frac,
            mean_newton_iters: self.mean_newton_iters,
            zeta: self.zeta,
            lr: self.lr,
            seconds: self.seconds,
        }
    }
}

/// Wall-clock timer; wasm32 has no clock in std, so it reads zero there.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        #[cfg(not(target_arch = "wasm32"))]
        return Self(std::time::Instant::now());
        #[cfg(target_arch = "wasm32")]
        Self()
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub name: String,
    pub eps_l2: f64,
    pub boundary_err: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub zeta: f64,
    pub prediction: DenseMatrix,
}

impl SampleEval {
    fn failed(name: &str, shape: (usize, usize)) -> Self {
        Self {
            name: name.to_string(),
            eps_l2: f64::NAN,
            boundary_err: f64::NAN,
            converged: false,
            iterations: 0,
            residual_norm: f64::NAN,
            zeta: f64::NAN,
            prediction: DenseMatrix::filled(shape.0, shape.1, f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub split: Split,
    pub samples: Vec<SampleEval>,
    pub seconds: f64,
}

impl Evaluation {
    /// Metrics over all samples; `eps_l2` is averaged over converged ones.
    pub fn row(&self, epoch: usize, zeta: f64, lr: f64) -> MetricsRow {
        let n = self.samples.len().max(1) as f64;
        let conv: Vec<&SampleEval> = self.samples.iter().filter(|s| s.converged).collect();
        let eps_l2 = if conv.is_empty() {
            f64::NAN
        } else {
            conv.iter().map(|s| s.eps_l2).sum::<f64>() / conv.len() as f64
        };
        MetricsRow {
            epoch,
            split: self.split,
            eps_l2,
            boundary_err: self.samples.iter().map(|s| s.boundary_err).fold(0.0, f64::max),
            conv_frac: conv.len() as f64 / n,
            mean_newton_iters: self.samples.iter().map(|s| s.iterations as f64).sum::<f64>() / n,
            zeta,
            lr,
            seconds: self.seconds,
        }
    }

    pub fn all_converged(&self) -> bool {
        self.samples.iter().all(|s| s.converged)
    }
}

/// Model, optimizer and Lipschitz budget.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: GeoNew,
    pub optimizer: Adam,
    pub budget: LipschitzBudget,
    /// Optimizer steps attempted (accepted or skipped).
    pub step: usize,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, d_in: usize) -> Result<Self> {
        config.validate()?;
        let model = GeoNew::new(config.model.clone(), d_in)?;
        let optimizer = Adam::new(config.adam.clone(), model.store.values());
        let budget = config.budget.clone();
        Ok(Self { config, model, optimizer, budget, step: 0, epochs_done: 0 })
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.config.batch_size)
    }

    pub fn lr_at(&self, step: usize, n_train: usize) -> f64 {
        let total = self.config.epochs * self.steps_per_epoch(n_train);
        cosine_lr(step, total, self.config.max_lr, self.config.min_lr)
    }

    /// `ζ` the current budget assigns to a sample with bound `sample_zeta`.
    pub fn zeta_policy(&self) -> impl Fn(f64) -> f64 + '_ {
        move |z| self.budget.zeta_for(z)
    }

    /// One pass over `train` in a seeded random order.
    pub fn train_epoch(&mut self, train: &[Prepared]) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let start = Stopwatch::start();
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut module_rng(self.config.seed, &format!("shuffle/{epoch}")));
        let n_params = self.model.store.len();
        let mut nonzero = vec![false; n_params];
        let (mut loss_sum, mut eps_sum, mut n_conv, mut iters, mut bnd) = (0.0, 0.0, 0usize, 0usize, 0.0f64);
        let mut skipped = 0;
        let mut lr = self.lr_at(self.step, train.len());
        for batch in order.chunks(self.config.batch_size) {
            lr = self.lr_at(self.step, train.len());
            let (out, batch_iters) = self.train_batch(train, batch, lr)?;
            self.step += 1;
            iters += batch_iters;
            match out {
                None => skipped += 1,
                Some(b) => {
                    loss_sum += b.loss_sum;
                    eps_sum += b.eps_sum;
                    n_conv += b.n_converged;
                    bnd = bnd.max(b.boundary_err);
                    for (flag, g) in nonzero.iter_mut().zip(&b.grads) {
                        *flag |= g.max_abs() > 0.0;
                    }
                }
            }
        }
        self.epochs_done += 1;
        let denom = n_conv.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / denom,
            eps_l2: if n_conv > 0 { eps_sum / denom } else { f64::NAN },
            boundary_err: bnd,
            conv_frac: n_conv as f64 / train.len() as f64,
            mean_newton_iters: iters as f64 / train.len() as f64,
            zeta: self.budget.zeta.unwrap_or(f64::NAN),
            lr,
            seconds: start.seconds(),
            skipped_batches: skipped,
            nonzero_grads: nonzero,
        };
        log::info!(
            "epoch {epoch}: loss {:.4e} eps {:.4e} conv {:.3} iters {:.2} zeta {:.4e} lr {:.3e} ({:.1}s)",
            stats.loss,
            stats.eps_l2,
            stats.conv_frac,
            stats.mean_newton_iters,
            stats.zeta,
            stats.lr,
            stats.seconds
        );
        Ok(stats)
    }

    /// Forward solves, acceptance check, adjoint gradients and one Adam step.
    /// `None` when the batch was rejected; also returns the Newton updates
    /// spent.
    fn train_batch(&mut self, train: &[Prepared], batch: &[usize], lr: f64) -> Result<(Option<BatchOutcome>, usize)> {
        let step = self.step;
        let budget = self.budget.clone();
        let policy = |z: f64| budget.zeta_for(z);
        let mut forwards = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &train[i];
            let anchors = self.model.anchors(s.ctx.n_nodes(), &format!("train/{}/{step}/{}", self.config.seed, s.name));
            match self.model.forward(&s.ctx, &anchors, true, &policy) {
                Ok(f) => forwards.push((i, f)),
                Err(e) if e.is_degenerate_partition() => log::warn!("step {step}: sample {} skipped: {e}", s.name),
                Err(e) => return Err(e.into()),
            }
        }
        let dim = self.model.config.p_free * self.model.config.n_fields;
        let mut rng = module_rng(self.config.seed, &format!("init/{step}"));
        let inits: Vec<Vec<f64>> = forwards.iter().map(|_| random_init(dim, &mut rng)).collect();
        let systems: Vec<_> = forwards.iter().map(|(_, f)| f.system.clone()).collect();
        let solved = batched_newton(&systems, inits, &self.config.solve)?;
        let iterations = solved.results.iter().map(|r| r.iterations).sum();
        // Samples lost to a degenerate partition count as unconverged.
        let n_conv = solved.results.iter().filter(|r| r.converged).count();
        let accepted = batch_accepted(n_conv, batch.len(), self.config.solve.threshold);

        let sample_zetas: Vec<f64> = forwards.iter().map(|(_, f)| f.fwd.zeta_sample).collect();
        let refresh = self.budget.due(step);
        if !accepted {
            log::warn!("step {step}: batch rejected, {n_conv} of {} converged", batch.len());
            if refresh {
                self.budget.observe(&sample_zetas);
            }
            return Ok((None, iterations));
        }
        let mut out = BatchOutcome {
            loss_sum: 0.0,
            eps_sum: 0.0,
            n_converged: 0,
            boundary_err: 0.0,
            grads: self.model.store.values().iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect(),
        };
        for ((i, sf), res) in forwards.iter().zip(&solved.results) {
            if !res.converged {
                continue;
            }
            let s = &train[*i];
            let (loss, grads) = sf.adjoint_gradient(&self.model.store, res, &s.target)?;
            let pred = sf.reconstruct(&res.u);
            out.loss_sum += loss;
            out.eps_sum += relative_l2(&pred, &s.target).unwrap_or(f64::NAN);
            out.boundary_err = out.boundary_err.max(s.boundary_error(&pred));
            out.n_converged += 1;
            for (acc, g) in out.grads.iter_mut().zip(&grads) {
                acc.add_assign(g).expect("gradient shapes match parameters");
            }
        }
        let scale = 1.0 / out.n_converged as f64;
        let mean: Vec<DenseMatrix> = out.grads.iter().map(|g| g.scale(scale)).collect();
        self.optimizer.step(self.model.store.values_mut(), &mean, lr);
        if refresh {
            self.budget.observe(&sample_zetas);
        }
        out.grads = mean;
        Ok((Some(out), iterations))
    }

    /// Solves every sample independently from a seeded standard-normal start.
    /// No parameters change.
    pub fn evaluate(&self, samples: &[Prepared], split: Split) -> Result<Evaluation> {
        let start = Stopwatch::start();
        let policy = self.zeta_policy();
        let dim = self.model.config.p_free * self.model.config.n_fields;
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let anchors = self.model.anchors(s.ctx.n_nodes(), &format!("eval/{}", s.name));
            let sf = match self.model.forward(&s.ctx, &anchors, false, &policy) {
                Ok(sf) => sf,
                Err(e) if e.is_degenerate_partition() => {
                    log::warn!("sample {} not solvable: {e}", s.name);
                    out.push(SampleEval::failed(&s.name, s.target.shape()));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let mut rng = module_rng(self.config.seed, &format!("eval-init/{}", s.name));
            let res = newton_solve(&sf.system, random_init(dim, &mut rng), &self.config.solve)?;
            let prediction = sf.reconstruct(&res.u);
            out.push(SampleEval {
                name: s.name.clone(),
                eps_l2: relative_l2(&prediction, &s.target).unwrap_or(f64::NAN),
                boundary_err: s.boundary_error(&prediction),
                converged: res.converged,
                iterations: res.iterations,
                residual_norm: res.residual_norm,
                zeta: sf.fwd.zeta,
                prediction,
            });
        }
        Ok(Evaluation { split, samples: out, seconds: start.seconds() })
    }

    pub fn to_container(&self) -> Container {
        let names = self.model.store.names().to_vec();
        let mut c = Container::new(json!({
            "config": self.config,
            "d_in": self.model.d_in,
            "step": self.step,
            "epochs_done": self.epochs_done,
            "budget": self.budget,
            "adam_t": self.optimizer.t,
            "params": names,
        }));
        for (name, value) in names.iter().zip(self.model.store.values()) {
            c.push(format!("param/{name}"), value.clone());
        }
        for (name, m) in names.iter().zip(&self.optimizer.m) {
            c.push(format!("adam_m/{name}"), m.clone());
        }
        for (name, v) in names.iter().zip(&self.optimizer.v) {
            c.push(format!("adam_v/{name}"), v.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: String| TrainError::Checkpoint(m);
        let meta = &c.meta;
        let config: TrainConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let d_in = meta["d_in"].as_u64().ok_or_else(|| bad("missing d_in".into()))? as usize;
        let mut trainer = Self::new(config, d_in)?;
        trainer.step = meta["step"].as_u64().ok_or_else(|| bad("missing step".into()))? as usize;
        trainer.epochs_done = meta["epochs_done"].as_u64().ok_or_else(|| bad("missing epochs_done".into()))? as usize;
        trainer.budget = serde_json::from_value(meta["budget"].clone()).map_err(|e| bad(format!("budget: {e}")))?;
        trainer.optimizer.t = meta["adam_t"].as_u64().ok_or_else(|| bad("missing adam_t".into()))?;
        let names = trainer.model.store.names().to_vec();
        for (k, name) in names.iter().enumerate() {
            let fetch = |prefix: &str| {
                let key = format!("{prefix}/{name}");
                let m = c.get(&key).ok_or_else(|| bad(format!("missing array {key}")))?;
                let expected = trainer.model.store.values()[k].shape();
                if m.shape() != expected {
                    return Err(bad(format!("{key} has shape {:?}, expected {expected:?}", m.shape())));
                }
                Ok(m.clone())
            };
            let (p, m, v) = (fetch("param")?, fetch("adam_m")?, fetch("adam_v")?);
            trainer.model.store.values_mut()[k] = p;
            trainer.optimizer.m[k] = m;
            trainer.optimizer.v[k] = v;
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(path, self.to_container().encode(CHECKPOINT_MAGIC)).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_container(&Container::decode(&bytes, CHECKPOINT_MAGIC)?)
    }
}

struct BatchOutcome {
    loss_sum: f64,
    eps_sum: f64,
    n_converged: usize,
    boundary_err: f64,
    grads: Vec<DenseMatrix>,
}
