//! The full geometry-conditioned model.
//!
//! Node features are encoded into tokens `z`; two pooled contexts condition
//! the partition network and the flux hypernetworks. One forward pass
//! produces the partition, the projected stiffness and the flux operators of
//! one sample, all on a single tape, from which Newton solves and adjoint
//! gradients are taken.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::feec::FineOperators;
use crate::flux::{complete_incidence_norm, compute_zeta, FluxConfig, FluxError, FluxModel, GraphVars, ReducedGraph};
use crate::linalg::DenseMatrix;
use crate::nn::{module_rng, AnchorEncoder, Bound, EncoderConfig, Linear, Mlp, NnError, ParamId, ParamStore, PerceiverPool};
use crate::reduced::{partition_on_tape, project_on_tape, BoundaryLayout, FineShared, ReducedError};
use crate::solver::{
    adjoint_lambda, adjoint_objective, newton_solve, random_init, residual_graph, ResidualValues, ResidualVars,
    SolveConfig, SolveResult, SolverError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sample has {got} feature columns, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("target has shape {got:?}, expected {expected:?}")]
    TargetShape { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

impl ModelError {
    /// The learned partition made the free stiffness singular: a property
    /// of the current parameters on one sample, not a programming error.
    pub fn is_degenerate_partition(&self) -> bool {
        matches!(self, ModelError::Flux(FluxError::SingularStiffness(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Learned partitions `P_free`.
    pub p_free: usize,
    pub n_fields: usize,
    /// Latent tokens per pooled context.
    pub n_context: usize,
    pub w_hidden: usize,
    /// Initial weight of the linear skip path of the partition network.
    pub alpha_init: f64,
    pub encoder: EncoderConfig,
    pub flux: FluxConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p_free: 8,
            n_fields: 1,
            n_context: 4,
            w_hidden: 64,
            alpha_init: 0.95,
            encoder: EncoderConfig::default(),
            flux: FluxConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_free == 0 || self.n_fields == 0 || self.n_context == 0 || self.w_hidden == 0 {
            return Err(ModelError::Config("p_free, n_fields, n_context and w_hidden must be positive".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(ModelError::Config("alpha_init must lie in (0, 1)".into()));
        }
        self.encoder.validate()?;
        self.flux.validate()?;
        Ok(())
    }
}

/// Everything about one sample the model consumes.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub features: DenseMatrix,
    pub fine: FineShared,
    pub layout: BoundaryLayout,
}

impl SampleContext {
    pub fn new(fine: &FineOperators, features: DenseMatrix, layout: BoundaryLayout) -> Self {
        Self { features, fine: FineShared::from(fine), layout }
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    /// Fixed Dirichlet coefficients, `n_fixed × F`.
    pub fn fixed_coefficients(&self) -> DenseMatrix {
        let n_fixed = self.layout.n_fixed();
        let f = self.layout.n_fields();
        DenseMatrix::from_fn(n_fixed, f, |r, c| self.layout.coefficients[c][r])
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z: Var,
    /// Per-field partition, `P_total × N`.
    pub w: Vec<Var>,
    /// Per-field reduced stiffness.
    pub k: Vec<Var>,
    pub residual: ResidualVars,
    /// Uniqueness bound of this sample.
    pub zeta_sample: f64,
    /// Bound actually used for the amplitude caps.
    pub zeta: f64,
}

/// A forward pass together with its tape and detached residual values.
pub struct SampleForward {
    pub tape: Tape,
    pub params: Bound,
    pub fwd: Forward,
    pub system: ResidualValues,
}

impl SampleForward {
    /// Partition values.
    pub fn partitions(&self) -> Vec<DenseMatrix> {
        self.fwd.w.iter().map(|&w| self.tape.value(w).clone()).collect()
    }

    /// Fine nodal field `N × F` for reduced free coefficients `u_free`.
    pub fn reconstruct(&self, u_free: &[f64]) -> DenseMatrix {
        let u = self.system.full_state(u_free);
        reconstruct_values(&self.partitions(), &u)
    }

    /// Sum of squared nodal errors and its gradient with respect to every
    /// parameter, through the implicit solution `solve.u`.
    pub fn adjoint_gradient(&self, store: &ParamStore, solve: &SolveResult, target: &DenseMatrix) -> Result<(f64, Vec<DenseMatrix>)> {
        let tape = &self.tape;
        let n_free = self.system.n_free;
        let n_fields = self.system.n_fields();
        let n_nodes = self.fwd.z.rows();
        if target.shape() != (n_nodes, n_fields) {
            return Err(ModelError::TargetShape { expected: (n_nodes, n_fields), got: target.shape() });
        }
        let u_full = self.system.full_state(&solve.u);
        let u_var = tape.constant(u_full.clone());
        let pred = reconstruct_on_tape(tape, &self.fwd.w, u_var)?;
        let diff = tape.sub(pred, tape.constant(target.clone()))?;
        let loss = tape.sum(tape.mul(diff, diff)?)?;

        // ∂L/∂u = 2 W (Wᵀu − target), free rows.
        let resid = tape.value(diff).clone();
        let mut dl_du = vec![0.0; n_free * n_fields];
        for (f, &w) in self.fwd.w.iter().enumerate() {
            let g = tape.value(w).matvec(&resid.column(f)).expect("partition shape");
            for i in 0..n_free {
                dl_du[i * n_fields + f] = 2.0 * g[i];
            }
        }
        let lambda = adjoint_lambda(&solve.jacobian, &dl_du)?;
        let u_free = tape.constant(DenseMatrix::new(n_free, n_fields, solve.u.clone()).expect("solver dimension"));
        let g = residual_graph(tape, &self.fwd.residual, u_free)?;
        let objective = adjoint_objective(tape, loss, g, &lambda)?;
        let grads = tape.backward(objective)?;
        Ok((tape.scalar_value(loss), store.collect_grads(&self.params, &grads)))
    }
}

/// `[W_fᵀ u_f]_f` on values.
pub fn reconstruct_values(w: &[DenseMatrix], u: &DenseMatrix) -> DenseMatrix {
    let n = w[0].cols();
    let mut out = DenseMatrix::zeros(n, w.len());
    for (f, wf) in w.iter().enumerate() {
        out.set_column(f, &wf.tr_matvec(&u.column(f)).expect("partition shape"));
    }
    out
}

pub fn reconstruct_on_tape(tape: &Tape, w: &[Var], u: Var) -> Result<Var> {
    let cols = w
        .iter()
        .enumerate()
        .map(|(f, &wf)| Ok(tape.matmul(tape.transpose(wf)?, tape.slice_cols(u, f, 1)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat_cols(&cols)?)
}

/// Result of a forward pass followed by a Newton solve.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Fine nodal field, `N × F`.
    pub u_fine: DenseMatrix,
    pub solve: SolveResult,
    pub zeta: f64,
    pub partitions: Vec<DenseMatrix>,
}

#[derive(Debug, Clone)]
pub struct GeoNew {
    pub config: ModelConfig,
    pub d_in: usize,
    pub store: ParamStore,
    encoder: AnchorEncoder,
    pool_w: PerceiverPool,
    pool_f: PerceiverPool,
    w_mlp: Mlp,
    w_skip: Linear,
    alpha_raw: ParamId,
    flux: FluxModel,
}

impl GeoNew {
    pub fn new(config: ModelConfig, d_in: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let d = config.encoder.d_model;
        let heads = config.encoder.n_heads;
        let encoder_cfg = EncoderConfig { seed, ..config.encoder.clone() };
        let encoder = AnchorEncoder::new(&mut store, "encoder", d_in, encoder_cfg)?;
        let pool_w = PerceiverPool::new(&mut store, "pool_w", config.n_context, d, heads, seed)?;
        let pool_f = PerceiverPool::new(&mut store, "pool_f", config.n_context, d, heads, seed)?;
        let d_ctx = config.n_context * d;
        let out = config.p_free * config.n_fields;
        let w_mlp = Mlp::new(&mut store, "partition.mlp", &[d + d_ctx, config.w_hidden, out], seed)?;
        let w_skip = Linear::new(&mut store, "partition.skip", d + d_ctx, out, true, seed)?;
        let a = config.alpha_init;
        let alpha_raw = store.add("partition.alpha", DenseMatrix::scalar((a / (1.0 - a)).ln()))?;
        let flux = FluxModel::new(&mut store, "flux", config.n_fields, d, d_ctx, config.flux.clone(), seed)?;
        Ok(Self { config, d_in, store, encoder, pool_w, pool_f, w_mlp, w_skip, alpha_raw, flux })
    }

    pub fn n_blocks(&self) -> usize {
        self.config.encoder.n_blocks
    }

    /// Anchor sets for one pass over a sample, reproducible from `(seed, tag)`.
    pub fn anchors(&self, n_nodes: usize, tag: &str) -> Vec<Vec<usize>> {
        let mut rng: ChaCha8Rng = module_rng(self.config.seed, &format!("anchors/{tag}"));
        self.encoder.sample_anchors(n_nodes, &mut rng)
    }

    /// Builds the sample's reduced system on a fresh tape. `zeta_policy`
    /// maps the sample's own uniqueness bound to the `ζ` used for the caps.
    pub fn forward(
        &self,
        ctx: &SampleContext,
        anchors: &[Vec<usize>],
        with_grad: bool,
        zeta_policy: &dyn Fn(f64) -> f64,
    ) -> Result<SampleForward> {
        if ctx.features.cols() != self.d_in {
            return Err(ModelError::FeatureWidth { expected: self.d_in, got: ctx.features.cols() });
        }
        if ctx.layout.n_fields() != self.config.n_fields {
            return Err(ModelError::Config(format!(
                "boundary data has {} fields, model has {}",
                ctx.layout.n_fields(),
                self.config.n_fields
            )));
        }
        let tape = Tape::new();
        let p = if with_grad { self.store.bind(&tape) } else { self.store.bind_const(&tape) };
        let n = ctx.n_nodes();
        let x = tape.constant(ctx.features.clone());
        let z = self.encoder.forward_with_anchors(&tape, &p, x, anchors)?;
        let c_w = self.pool_w.forward(&tape, &p, z)?;
        let c_f = self.pool_f.forward(&tape, &p, z)?;

        let flat = tape.reshape(c_w, 1, c_w.rows() * c_w.cols())?;
        let broadcast = tape.matmul(tape.constant(DenseMatrix::filled(n, 1, 1.0)), flat)?;
        let input = tape.concat_cols(&[z, broadcast])?;
        let alpha = tape.sigmoid(p.var(self.alpha_raw))?;
        let skip = tape.scale_var(self.w_skip.forward(&tape, &p, input)?, alpha)?;
        let logits = tape.add(self.w_mlp.forward(&tape, &p, input)?, skip)?;

        let p_free = self.config.p_free;
        let p_total = p_free + ctx.layout.n_fixed();
        let graph = ReducedGraph::new(p_total);
        let g = GraphVars::bind(&tape, &graph, self.config.flux.mean_channel);
        let mut w = Vec::with_capacity(self.config.n_fields);
        let mut k = Vec::with_capacity(self.config.n_fields);
        let free: Vec<usize> = (0..p_free).collect();
        let mut zeta_sample = f64::INFINITY;
        let fc = &self.config.flux;
        for f in 0..self.config.n_fields {
            let lf = tape.slice_cols(logits, f * p_free, p_free)?;
            let wf = partition_on_tape(&tape, lf, &ctx.layout, f)?;
            let (_, kf) = project_on_tape(&tape, wf, &ctx.fine, g.d0)?;
            let k_free = tape.value(kf).submatrix(&free, &free);
            let zf = compute_zeta(&k_free, complete_incidence_norm(p_total), fc.epsilon, fc.safety)?;
            zeta_sample = zeta_sample.min(zf);
            w.push(wf);
            k.push(kf);
        }
        let zeta = zeta_policy(zeta_sample);
        let flux = self.flux.operators(&tape, &p, c_f, z, w[0], &g, 0.5 * zeta)?;
        let fixed = tape.constant(ctx.fixed_coefficients());
        let residual = ResidualVars { k: k.clone(), flux, graph: g, fixed, epsilon: fc.epsilon };
        let system = ResidualValues {
            k: k.iter().map(|&v| tape.value(v).clone()).collect(),
            flux: flux.values(&tape),
            fixed: ctx.fixed_coefficients(),
            epsilon: fc.epsilon,
            n_free: p_free,
            mean_channel: fc.mean_channel,
            graph,
        };
        let fwd = Forward { z, w, k, residual, zeta_sample, zeta };
        Ok(SampleForward { tape, params: p, fwd, system })
    }

    /// Forward pass and Newton solve from a standard normal start.
    pub fn predict(
        &self,
        ctx: &SampleContext,
        anchors: &[Vec<usize>],
        zeta_policy: &dyn Fn(f64) -> f64,
        solve: &SolveConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Prediction> {
        let sf = self.forward(ctx, anchors, false, zeta_policy)?;
        let u0 = random_init(self.config.p_free * self.config.n_fields, rng);
        let result = newton_solve(&sf.system, u0, solve)?;
        Ok(Prediction {
            u_fine: sf.reconstruct(&result.u),
            zeta: sf.fwd.zeta,
            partitions: sf.partitions(),
            solve: result,
        })
    }
}
