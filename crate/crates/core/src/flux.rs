//! Antisymmetric, Lipschitz-bounded reduced flux and its budget.
//!
//! The primal flux on reduced edge `(i, j)` acts on the odd edge feature
//! `ξ_ij = [Πᵀ(u_i − u_j), ½Πᵀ(u_i + u_j)]` (sign of the mean block flips
//! with orientation) through `β′Aξ + γ′C tanh(Bξ)`, then returns to field
//! space through `Π`. A learned SPD map `H` turns it into the dual flux. All
//! linear maps are spectrally normalized, so the flux is Lipschitz in `u`
//! with constant at most `(β′ + γ′)(1 + ε_H)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::linalg::{sym_eig, DenseMatrix, LinalgError};
use crate::nn::{bounded_linear, module_rng, xavier_uniform, zero_linear, Bound, Linear, Mlp, NnError, ParamId, ParamStore};
use crate::reduced::{complete_graph_incidence, reduced_edges};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluxError {
    #[error("free stiffness is singular (smallest eigenvalue {0:e}); no Dirichlet constraint present?")]
    SingularStiffness(f64),
    #[error("invalid flux configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, FluxError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluxConfig {
    /// Operator-space width of `Π`.
    pub d_op: usize,
    pub hyper_hidden: usize,
    /// Diffusion coefficient `ε`.
    pub epsilon: f64,
    pub eps_h: f64,
    pub hodge_rank: usize,
    /// Keep the signed-mean half of the edge feature.
    pub mean_channel: bool,
    /// Initial amplitude logits: `β′ = cap·σ(raw)`.
    pub beta_init: f64,
    pub gamma_init: f64,
    /// Multiplier applied to the uniqueness bound before halving.
    pub safety: f64,
}

impl Default for FluxConfig {
    fn default() -> Self {
        Self {
            d_op: 16,
            hyper_hidden: 16,
            epsilon: 1.0,
            eps_h: 1e-2,
            hodge_rank: 4,
            mean_channel: true,
            beta_init: 0.0,
            gamma_init: 0.0,
            safety: 0.99,
        }
    }
}

impl FluxConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FluxError::Config(m.to_string()));
        if self.d_op == 0 || self.hyper_hidden == 0 || self.hodge_rank == 0 {
            return bad("d_op, hyper_hidden and hodge_rank must be positive");
        }
        if !(self.epsilon > 0.0) || !(self.eps_h > 0.0) {
            return bad("epsilon and eps_h must be positive");
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return bad("safety must lie in (0, 1)");
        }
        if !self.beta_init.is_finite() || !self.gamma_init.is_finite() {
            return bad("amplitude initialisations must be finite");
        }
        Ok(())
    }

    /// Cap on each of `β′`, `γ′` so that the certified constant stays within
    /// `zeta_eff`.
    pub fn amplitude_cap(&self, zeta_eff: f64) -> f64 {
        zeta_eff / (2.0 * (1.0 + self.eps_h))
    }
}

/// `‖K_free⁻¹‖ = 1/λ_min`; the flux is unique-solvable when its Lipschitz
/// constant is below `ε / (‖K_free⁻¹‖·‖δ0‖)`. Returns that bound times
/// `safety`.
pub fn compute_zeta(k_free: &DenseMatrix, d0_norm: f64, epsilon: f64, safety: f64) -> Result<f64> {
    let lam = sym_eig(k_free)?.values.first().copied().unwrap_or(0.0);
    if !(lam > 1e-14 * k_free.max_abs()) {
        return Err(FluxError::SingularStiffness(lam));
    }
    Ok(safety * epsilon * lam / d0_norm)
}

/// `‖δ0‖₂` of the complete graph on `p` vertices.
pub fn complete_incidence_norm(p: usize) -> f64 {
    (p as f64).sqrt()
}

/// Contraction factor `C_L ‖K_free⁻¹‖ ‖δ0‖ / ε` of the fixed-point map.
pub fn tau(c_l: f64, k_free: &DenseMatrix, d0_norm: f64, epsilon: f64) -> Result<f64> {
    let lam = sym_eig(k_free)?.values.first().copied().unwrap_or(0.0);
    Ok(c_l * d0_norm / (epsilon * lam))
}

/// Exponential moving average of `ζ` refreshed every few steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzBudget {
    pub zeta: Option<f64>,
    pub decay: f64,
    pub refresh_every: usize,
    /// Use each sample's own `ζ` instead of the average.
    pub per_sample: bool,
}

impl Default for LipschitzBudget {
    fn default() -> Self {
        Self { zeta: None, decay: 0.9, refresh_every: 10, per_sample: false }
    }
}

impl LipschitzBudget {
    pub fn due(&self, step: usize) -> bool {
        self.zeta.is_none() || step % self.refresh_every.max(1) == 0
    }

    /// Folds per-sample values in; the first observation initialises.
    pub fn observe(&mut self, samples: &[f64]) {
        if samples.is_empty() {
            return;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        self.zeta = Some(match self.zeta {
            None => mean,
            Some(z) => self.decay * z + (1.0 - self.decay) * mean,
        });
    }

    /// `ζ` used for a sample whose own bound is `sample_zeta`.
    pub fn zeta_for(&self, sample_zeta: f64) -> f64 {
        match (self.per_sample, self.zeta) {
            (false, Some(z)) => z,
            _ => sample_zeta,
        }
    }
}

/// Constant matrices of the complete reduced graph on `p` partitions.
#[derive(Debug, Clone)]
pub struct ReducedGraph {
    pub p: usize,
    pub edges: Vec<(usize, usize)>,
    /// `P1 × P` incidence.
    pub d0: DenseMatrix,
    /// `|δ0|`: +1 at both endpoints.
    pub d0_abs: DenseMatrix,
}

impl ReducedGraph {
    pub fn new(p: usize) -> Self {
        let d0 = complete_graph_incidence(p);
        let d0_abs = d0.map(f64::abs);
        Self { p, edges: reduced_edges(p), d0, d0_abs }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Exact `‖[δ0; ½|δ0|]‖₂⁻¹` (or `‖δ0‖₂⁻¹` without the mean block).
    pub fn feature_scale(&self, mean_channel: bool) -> f64 {
        let p = self.p as f64;
        if mean_channel {
            (4.0 / (5.0 * p - 2.0)).sqrt()
        } else {
            1.0 / p.sqrt()
        }
    }
}

/// Graph matrices bound as tape constants.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub d0: Var,
    pub d0_abs: Var,
    pub scale: f64,
    pub mean_channel: bool,
}

impl GraphVars {
    pub fn bind(tape: &Tape, graph: &ReducedGraph, mean_channel: bool) -> Self {
        Self {
            d0: tape.constant(graph.d0.clone()),
            d0_abs: tape.constant(graph.d0_abs.clone()),
            scale: graph.feature_scale(mean_channel),
            mean_channel,
        }
    }
}

/// Normalized `Ξ` (`P1 × 2d_op`) for `u` (`P × F`) and effective `Π` (`F × d_op`).
pub fn edge_features(tape: &Tape, u: Var, pi: Var, g: &GraphVars) -> Result<Var> {
    let up = tape.matmul(u, pi)?;
    let diff = tape.scale(tape.matmul(g.d0, up)?, -g.scale)?;
    let mean = if g.mean_channel {
        tape.scale(tape.matmul(g.d0_abs, up)?, 0.5 * g.scale)?
    } else {
        tape.constant(DenseMatrix::zeros(diff.rows(), diff.cols()))
    };
    Ok(tape.concat_cols(&[diff, mean])?)
}

/// Effective flux operators of one sample.
#[derive(Debug, Clone, Copy)]
pub struct FluxVars {
    pub pi: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub beta: Var,
    pub gamma: Var,
    /// `P1 × P1` SPD metric.
    pub h: Var,
}

/// Plain values of [`FluxVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct FluxValues {
    pub pi: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    pub beta: f64,
    pub gamma: f64,
    pub h: DenseMatrix,
}

impl FluxVars {
    pub fn values(&self, tape: &Tape) -> FluxValues {
        FluxValues {
            pi: tape.value(self.pi).clone(),
            a: tape.value(self.a).clone(),
            b: tape.value(self.b).clone(),
            c: tape.value(self.c).clone(),
            beta: tape.scalar_value(self.beta),
            gamma: tape.scalar_value(self.gamma),
            h: tape.value(self.h).clone(),
        }
    }
}

impl FluxValues {
    pub fn bind(&self, tape: &Tape) -> FluxVars {
        FluxVars {
            pi: tape.constant(self.pi.clone()),
            a: tape.constant(self.a.clone()),
            b: tape.constant(self.b.clone()),
            c: tape.constant(self.c.clone()),
            beta: tape.constant(DenseMatrix::scalar(self.beta)),
            gamma: tape.constant(DenseMatrix::scalar(self.gamma)),
            h: tape.constant(self.h.clone()),
        }
    }

    /// Certified Lipschitz constant of `u ↦ H F′(u)` in the Frobenius norm.
    pub fn certified_lipschitz(&self, eps_h: f64) -> f64 {
        (self.beta + self.gamma) * (1.0 + eps_h)
    }

    /// Dual flux for a plain `u` (`P × F`).
    pub fn evaluate(&self, graph: &ReducedGraph, mean_channel: bool, u: &DenseMatrix) -> Result<DenseMatrix> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let g = GraphVars::bind(&tape, graph, mean_channel);
        let f = dual_flux(&tape, &vars, &g, tape.constant(u.clone()))?;
        let out = tape.value(f).clone();
        Ok(out)
    }
}

/// `F′ = (β′ Ξ A + γ′ tanh(Ξ B) C) Πᵀ`, `P1 × F`.
pub fn primal_flux(tape: &Tape, ops: &FluxVars, g: &GraphVars, u: Var) -> Result<Var> {
    flux_from_features(tape, ops, edge_features(tape, u, ops.pi, g)?)
}

/// Per-edge primal flux of precomputed edge features; odd in `xi`.
pub fn flux_from_features(tape: &Tape, ops: &FluxVars, xi: Var) -> Result<Var> {
    let lin = tape.scale_var(tape.matmul(xi, ops.a)?, ops.beta)?;
    let hidden = tape.tanh(tape.matmul(xi, ops.b)?)?;
    let nl = tape.scale_var(tape.matmul(hidden, ops.c)?, ops.gamma)?;
    let f = tape.add(lin, nl)?;
    Ok(tape.matmul(f, tape.transpose(ops.pi)?)?)
}

/// `𝓕 = H F′`.
pub fn dual_flux(tape: &Tape, ops: &FluxVars, g: &GraphVars, u: Var) -> Result<Var> {
    let f = primal_flux(tape, ops, g, u)?;
    Ok(tape.matmul(ops.h, f)?)
}

/// `H = 𝓗𝓗ᵀ / max(1, ‖𝓗‖_F²) + ε_H I`: SPD, eigenvalues in `[ε_H, 1 + ε_H]`.
pub fn hodge_from_factor(tape: &Tape, factor: Var, eps_h: f64) -> Result<Var> {
    let gram = tape.matmul(factor, tape.transpose(factor)?)?;
    let fro2 = tape.sum(tape.mul(factor, factor)?)?;
    let inv = tape.recip(tape.max_const(fro2, 1.0)?)?;
    let n = factor.rows();
    let shift = tape.constant(DenseMatrix::identity(n).scale(eps_h));
    Ok(tape.add(tape.scale_var(gram, inv)?, shift)?)
}

/// Trainable flux parameters: projection, base operators, hypernetworks on
/// the flux context, amplitudes and the Hodge factor network.
#[derive(Debug, Clone)]
pub struct FluxModel {
    pub config: FluxConfig,
    pub n_fields: usize,
    pub pi: ParamId,
    pub a0: ParamId,
    pub b0: ParamId,
    pub c0: ParamId,
    pub hyper_a: Mlp,
    pub hyper_b: Mlp,
    pub hyper_c: Mlp,
    pub raw_beta: ParamId,
    pub raw_gamma: ParamId,
    pub hodge: Linear,
}

impl FluxModel {
    /// `d_context` is the flattened width of the flux context.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_fields: usize,
        d_model: usize,
        d_context: usize,
        config: FluxConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_op;
        let pi0 = DenseMatrix::from_fn(n_fields, d, |f, k| if f == k { 1.0 } else { 0.0 });
        let pi = store.add(format!("{name}.pi"), pi0)?;
        let a0 = store.add(format!("{name}.a0"), DenseMatrix::from_fn(2 * d, d, |i, j| if i == j { 1.0 } else { 0.0 }))?;
        let b0 = store.add(format!("{name}.b0"), xavier_uniform(2 * d, d, &mut module_rng(seed, &format!("{name}.b0"))))?;
        let c0 = store.add(format!("{name}.c0"), xavier_uniform(d, d, &mut module_rng(seed, &format!("{name}.c0"))))?;
        let h = config.hyper_hidden;
        let hyper_a = Mlp::new(store, &format!("{name}.hyper_a"), &[d_context, h, 2 * d * d], seed)?;
        let hyper_b = Mlp::new(store, &format!("{name}.hyper_b"), &[d_context, h, 2 * d * d], seed)?;
        let hyper_c = Mlp::new(store, &format!("{name}.hyper_c"), &[d_context, h, d * d], seed)?;
        for mlp in [&hyper_a, &hyper_b, &hyper_c] {
            zero_linear(store, mlp.last());
        }
        let raw_beta = store.add(format!("{name}.raw_beta"), DenseMatrix::scalar(config.beta_init))?;
        let raw_gamma = store.add(format!("{name}.raw_gamma"), DenseMatrix::scalar(config.gamma_init))?;
        let hodge = Linear::new(store, &format!("{name}.hodge"), d_model, config.hodge_rank, true, seed)?;
        Ok(Self { config, n_fields, pi, a0, b0, c0, hyper_a, hyper_b, hyper_c, raw_beta, raw_gamma, hodge })
    }

    /// Flux operators for flux context `c_f` (`n_c × d_model`), hodge
    /// embeddings from node tokens `z` pooled through partition `w`.
    pub fn operators(
        &self,
        tape: &Tape,
        p: &Bound,
        c_f: Var,
        z: Var,
        w: Var,
        g: &GraphVars,
        zeta_eff: f64,
    ) -> Result<FluxVars> {
        let d = self.config.d_op;
        let flat = tape.reshape(c_f, 1, c_f.rows() * c_f.cols())?;
        let with_hyper = |base: ParamId, mlp: &Mlp, rows: usize| -> Result<Var> {
            let delta = tape.reshape(mlp.forward(tape, p, flat)?, rows, d)?;
            Ok(bounded_linear(tape, tape.add(p.var(base), delta)?)?)
        };
        let a = with_hyper(self.a0, &self.hyper_a, 2 * d)?;
        let b = with_hyper(self.b0, &self.hyper_b, 2 * d)?;
        let c = with_hyper(self.c0, &self.hyper_c, d)?;
        let pi = bounded_linear(tape, p.var(self.pi))?;
        let cap = self.config.amplitude_cap(zeta_eff);
        let beta = tape.scale(tape.sigmoid(p.var(self.raw_beta))?, cap)?;
        let gamma = tape.scale(tape.sigmoid(p.var(self.raw_gamma))?, cap)?;
        let h = self.hodge(tape, p, z, w, g)?;
        Ok(FluxVars { pi, a, b, c, beta, gamma, h })
    }

    /// Hodge factor rows `tanh((m_i + m_j) G)` from partition means
    /// `m = diag(W1)⁻¹ W z`.
    pub fn hodge(&self, tape: &Tape, p: &Bound, z: Var, w: Var, g: &GraphVars) -> Result<Var> {
        let mass = tape.max_const(tape.row_sums(w)?, 1e-12)?;
        let means = tape.mul_col(tape.matmul(w, z)?, tape.recip(mass)?)?;
        let pair = tape.matmul(g.d0_abs, means)?;
        let factor = tape.tanh(self.hodge.forward(tape, p, pair)?)?;
        hodge_from_factor(tape, factor, self.config.eps_h)
    }
}
