//! Learned residual, Newton iteration and adjoint sensitivities.
//!
//! The reduced residual on the learned partitions is
//! `G(u) = ε K u + δ0ᵀ 𝓕(u)` restricted to free rows, with the Dirichlet
//! coefficients appended to `u` before the flux sees it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::flux::{dual_flux, FluxError, FluxValues, FluxVars, GraphVars, ReducedGraph};
use crate::linalg::{norm2, DenseMatrix, Lu};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("Jacobian is singular at the solution (pivot {pivot} = {value:e})")]
    SingularJacobian { pivot: usize, value: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("state has {got} entries, system has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Flux(#[from] FluxError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of a batch that must converge for the batch to count.
    pub threshold: f64,
    /// Halve the Newton step while the residual norm grows.
    pub line_search: bool,
    pub max_halvings: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 200, threshold: 0.8, line_search: true, max_halvings: 8 }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(SolverError::Config("tol must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(SolverError::Config("threshold must lie in (0, 1]".into()));
        }
        if self.max_iter == 0 {
            return Err(SolverError::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// A square nonlinear system with an exact Jacobian.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;
    /// Residual and Jacobian `∂G_k/∂u_l` at `u`.
    fn evaluate(&self, u: &[f64]) -> Result<(Vec<f64>, DenseMatrix)>;
    fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(u)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub u: Vec<f64>,
    pub converged: bool,
    /// Newton updates taken.
    pub iterations: usize,
    pub residual_norm: f64,
    /// Jacobian at `u`.
    pub jacobian: DenseMatrix,
}

/// Standard normal initial state.
pub fn random_init(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

struct NewtonState {
    u: Vec<f64>,
    g: Vec<f64>,
    j: DenseMatrix,
    norm: f64,
    iterations: usize,
    /// Stopped without converging (singular Jacobian or non-finite state).
    stalled: bool,
}

impl NewtonState {
    fn new<S: NonlinearSystem + ?Sized>(sys: &S, u0: Vec<f64>) -> Result<Self> {
        if u0.len() != sys.dim() {
            return Err(SolverError::Dimension { expected: sys.dim(), got: u0.len() });
        }
        let (g, j) = sys.evaluate(&u0)?;
        let norm = norm2(&g);
        Ok(Self { u: u0, g, j, norm, iterations: 0, stalled: !norm.is_finite() })
    }

    fn converged(&self, tol: f64) -> bool {
        self.norm <= tol
    }

    fn active(&self, cfg: &SolveConfig) -> bool {
        !self.stalled && !self.converged(cfg.tol) && self.iterations < cfg.max_iter
    }

    fn step<S: NonlinearSystem + ?Sized>(&mut self, sys: &S, cfg: &SolveConfig) -> Result<()> {
        let lu = match Lu::factor(&self.j) {
            Ok(lu) => lu,
            Err(_) => {
                self.stalled = true;
                return Ok(());
            }
        };
        let delta = lu.solve(&self.g);
        let mut t = 1.0;
        let mut trial: Vec<f64> = self.u.iter().zip(&delta).map(|(u, d)| u - d).collect();
        let (mut g, mut j) = sys.evaluate(&trial)?;
        if cfg.line_search {
            let mut halvings = 0;
            while !(norm2(&g) < self.norm) && halvings < cfg.max_halvings {
                t *= 0.5;
                halvings += 1;
                trial = self.u.iter().zip(&delta).map(|(u, d)| u - t * d).collect();
                (g, j) = sys.evaluate(&trial)?;
            }
        }
        self.iterations += 1;
        self.norm = norm2(&g);
        self.u = trial;
        self.g = g;
        self.j = j;
        if !self.norm.is_finite() {
            self.stalled = true;
        }
        Ok(())
    }

    fn finish(self, tol: f64) -> SolveResult {
        SolveResult {
            converged: self.converged(tol),
            u: self.u,
            iterations: self.iterations,
            residual_norm: self.norm,
            jacobian: self.j,
        }
    }
}

/// Newton's method from `u0` until `‖G‖ ≤ tol` or `max_iter` updates.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(sys: &S, u0: Vec<f64>, cfg: &SolveConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let mut state = NewtonState::new(sys, u0)?;
    while state.active(cfg) {
        state.step(sys, cfg)?;
    }
    Ok(state.finish(cfg.tol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSolve {
    pub results: Vec<SolveResult>,
    /// At least `threshold` of the batch converged.
    pub accepted: bool,
    /// Lockstep Newton rounds performed.
    pub rounds: usize,
}

impl BatchSolve {
    pub fn converged_fraction(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().filter(|r| r.converged).count() as f64 / self.results.len() as f64
    }
}

/// Whether `n_converged` of `n` meets the acceptance threshold.
pub fn batch_accepted(n_converged: usize, n: usize, threshold: f64) -> bool {
    n > 0 && n_converged as f64 >= threshold * n as f64
}

/// Lockstep Newton over a batch: every round advances each unfinished
/// system by one update, and the batch stops as soon as the converged
/// fraction reaches `threshold` or the iteration limit is hit. Systems still
/// running at that point are reported as not converged.
pub fn batched_newton<S: NonlinearSystem + Sync>(
    systems: &[S],
    inits: Vec<Vec<f64>>,
    cfg: &SolveConfig,
) -> Result<BatchSolve> {
    cfg.validate()?;
    if inits.len() != systems.len() {
        return Err(SolverError::Dimension { expected: systems.len(), got: inits.len() });
    }
    let mut states = map_maybe_parallel(systems.iter().zip(inits).collect(), |(s, u0)| NewtonState::new(s, u0))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = states.len();
    let count = |states: &[NewtonState]| states.iter().filter(|s| s.converged(cfg.tol)).count();
    let mut rounds = 0;
    while rounds < cfg.max_iter && !batch_accepted(count(&states), n, cfg.threshold) {
        if !states.iter().any(|s| s.active(cfg)) {
            break;
        }
        let work: Vec<(&S, &mut NewtonState)> = systems.iter().zip(states.iter_mut()).collect();
        map_maybe_parallel(work, |(s, st)| if st.active(cfg) { st.step(s, cfg) } else { Ok(()) })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        rounds += 1;
    }
    let accepted = batch_accepted(count(&states), n, cfg.threshold);
    Ok(BatchSolve { results: states.into_iter().map(|s| s.finish(cfg.tol)).collect(), accepted, rounds })
}

#[cfg(feature = "parallel")]
fn map_maybe_parallel<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_maybe_parallel<T, R>(items: Vec<T>, f: impl Fn(T) -> R) -> Vec<R> {
    items.into_iter().map(f).collect()
}

/// Solves `Jᵀ λ = ∂L/∂u`.
pub fn adjoint_lambda(jacobian: &DenseMatrix, dl_du: &[f64]) -> Result<Vec<f64>> {
    let lu = Lu::factor(jacobian).map_err(|e| match e {
        crate::linalg::LinalgError::Singular { pivot, value } => SolverError::SingularJacobian { pivot, value },
        other => SolverError::Config(other.to_string()),
    })?;
    Ok(lu.solve_transpose(dl_du))
}

/// `L − ⟨λ, G⟩` with constant `λ`: its parameter gradient is the total
/// derivative `dL/dθ = ∂L/∂θ − λᵀ ∂G/∂θ` at a root of `G`.
pub fn adjoint_objective(tape: &Tape, loss: Var, residual: Var, lambda: &[f64]) -> Result<Var> {
    let lam = DenseMatrix::new(residual.rows(), residual.cols(), lambda.to_vec())
        .map_err(|_| SolverError::Dimension { expected: residual.rows() * residual.cols(), got: lambda.len() })?;
    let inner = tape.sum(tape.mul(residual, tape.constant(lam))?)?;
    Ok(tape.sub(loss, inner)?)
}

/// Tape handles of the reduced residual's operands.
#[derive(Debug, Clone)]
pub struct ResidualVars {
    /// Per-field reduced stiffness, `P × P`.
    pub k: Vec<Var>,
    pub flux: FluxVars,
    pub graph: GraphVars,
    /// Dirichlet coefficients, `n_fixed × F`.
    pub fixed: Var,
    pub epsilon: f64,
}

/// `G(u_free)`, `P_free × F`.
pub fn residual_graph(tape: &Tape, rv: &ResidualVars, u_free: Var) -> Result<Var> {
    let u = tape.concat_rows(&[u_free, rv.fixed])?;
    let mut cols = Vec::with_capacity(rv.k.len());
    for (f, &k) in rv.k.iter().enumerate() {
        let uf = tape.slice_cols(u, f, 1)?;
        cols.push(tape.matmul(k, uf)?);
    }
    let diffusion = tape.scale(tape.concat_cols(&cols)?, rv.epsilon)?;
    let flux = dual_flux(tape, &rv.flux, &rv.graph, u)?;
    let div = tape.matmul(tape.transpose(rv.graph.d0)?, flux)?;
    let full = tape.add(diffusion, div)?;
    Ok(tape.slice_rows(full, 0, u_free.rows())?)
}

/// Plain values of the residual operands, detached from any training tape.
#[derive(Debug, Clone)]
pub struct ResidualValues {
    pub k: Vec<DenseMatrix>,
    pub flux: FluxValues,
    pub fixed: DenseMatrix,
    pub epsilon: f64,
    pub n_free: usize,
    pub mean_channel: bool,
    pub graph: ReducedGraph,
}

impl ResidualValues {
    pub fn n_fields(&self) -> usize {
        self.k.len()
    }

    pub fn bind(&self, tape: &Tape) -> ResidualVars {
        ResidualVars {
            k: self.k.iter().map(|k| tape.constant(k.clone())).collect(),
            flux: self.flux.bind(tape),
            graph: GraphVars::bind(tape, &self.graph, self.mean_channel),
            fixed: tape.constant(self.fixed.clone()),
            epsilon: self.epsilon,
        }
    }

    /// Full coefficient matrix `[u_free; fixed]` from a flat free state.
    pub fn full_state(&self, u_free: &[f64]) -> DenseMatrix {
        let f = self.n_fields();
        let mut out = DenseMatrix::zeros(self.n_free + self.fixed.rows(), f);
        out.as_mut_slice()[..u_free.len()].copy_from_slice(u_free);
        out.as_mut_slice()[u_free.len()..].copy_from_slice(self.fixed.as_slice());
        out
    }

    /// `δ0ᵀ 𝓕(u)` over all partitions.
    pub fn flux_divergence(&self, u_free: &[f64]) -> Result<DenseMatrix> {
        let flux = self.flux.evaluate(&self.graph, self.mean_channel, &self.full_state(u_free))?;
        Ok(self.graph.d0.tr_matmul(&flux).expect("graph shapes"))
    }
}

impl NonlinearSystem for ResidualValues {
    fn dim(&self) -> usize {
        self.n_free * self.n_fields()
    }

    fn evaluate(&self, u: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        if u.len() != self.dim() {
            return Err(SolverError::Dimension { expected: self.dim(), got: u.len() });
        }
        let tape = Tape::new();
        let rv = self.bind(&tape);
        let x = tape.leaf(DenseMatrix::new(self.n_free, self.n_fields(), u.to_vec()).expect("dim checked"));
        let g = residual_graph(&tape, &rv, x)?;
        let n = self.dim();
        let mut jac = DenseMatrix::zeros(n, n);
        let mut seed = DenseMatrix::zeros(g.rows(), g.cols());
        for k in 0..n {
            seed.as_mut_slice()[k] = 1.0;
            let grads = tape.backward_with_seed(g, &seed)?;
            jac.row_mut(k).copy_from_slice(grads.wrt(x).as_slice());
            seed.as_mut_slice()[k] = 0.0;
        }
        let out = tape.value(g).as_slice().to_vec();
        Ok((out, jac))
    }

    fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let rv = self.bind(&tape);
        let x = tape.constant(DenseMatrix::new(self.n_free, self.n_fields(), u.to_vec()).map_err(|_| {
            SolverError::Dimension { expected: self.dim(), got: u.len() }
        })?);
        let g = residual_graph(&tape, &rv, x)?;
        let out = tape.value(g).as_slice().to_vec();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{hodge_from_factor, FluxConfig};
    use crate::nn::bounded_linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `G(u) = A u − b`.
    struct Affine {
        a: DenseMatrix,
        b: Vec<f64>,
    }

    impl NonlinearSystem for Affine {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn evaluate(&self, u: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
            let au = self.a.matvec(u).unwrap();
            Ok((au.iter().zip(&self.b).map(|(x, y)| x - y).collect(), self.a.clone()))
        }
    }

    /// `G(u) = u² + c`: no real root for `c > 0`; Newton converges linearly
    /// for `c = 0`.
    struct Quadratic {
        c: f64,
    }

    impl NonlinearSystem for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, u: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
            Ok((vec![u[0] * u[0] + self.c], DenseMatrix::scalar(2.0 * u[0])))
        }
    }

    fn plain() -> SolveConfig {
        SolveConfig { line_search: false, ..SolveConfig::default() }
    }

    #[test]
    fn defaults_match_protocol() {
        let c = SolveConfig::default();
        assert_eq!((c.tol, c.max_iter, c.threshold), (1e-6, 200, 0.8));
        assert!(SolveConfig { threshold: 0.0, ..c.clone() }.validate().is_err());
        assert!(SolveConfig { tol: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn affine_system_takes_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = Affine {
            a: DenseMatrix::from_rows(&[vec![3.0, 1.0], vec![-1.0, 2.0]]),
            b: vec![1.0, -4.0],
        };
        for _ in 0..5 {
            let r = newton_solve(&sys, random_init(2, &mut rng), &plain()).unwrap();
            assert!(r.converged);
            assert_eq!(r.iterations, 1);
        }
    }

    #[test]
    fn rootless_system_hits_iteration_cap() {
        let r = newton_solve(&Quadratic { c: 1.0 }, vec![0.3], &plain()).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 200);
    }

    #[test]
    fn batch_accepts_at_threshold_and_stops_early() {
        // 8 of 10 affine systems converge after one round; the batch stops
        // there, leaving the slow and rootless systems unconverged.
        let affine = |k: f64| Affine { a: DenseMatrix::scalar(1.0 + k), b: vec![k] };
        enum Sys {
            A(Affine),
            Q(Quadratic),
        }
        impl NonlinearSystem for Sys {
            fn dim(&self) -> usize {
                1
            }
            fn evaluate(&self, u: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
                match self {
                    Sys::A(a) => a.evaluate(u),
                    Sys::Q(q) => q.evaluate(u),
                }
            }
        }
        let mut systems: Vec<Sys> = (0..8).map(|k| Sys::A(affine(k as f64))).collect();
        systems.push(Sys::Q(Quadratic { c: 0.0 }));
        systems.push(Sys::Q(Quadratic { c: 1.0 }));
        let mut inits = vec![vec![1.0]; 10];
        // From 1.0 the rootless quadratic would land on its critical point.
        inits[9] = vec![0.3];
        let out = batched_newton(&systems, inits.clone(), &plain()).unwrap();
        assert!(out.accepted);
        assert_eq!(out.rounds, 1);
        assert_eq!(out.results.iter().filter(|r| r.converged).count(), 8);
        assert!(!out.results[8].converged && out.results[8].iterations == 1);

        // Requiring everyone: the slow quadratic converges, the rootless one
        // runs to the cap and the batch is rejected.
        let all = SolveConfig { threshold: 1.0, ..plain() };
        let out = batched_newton(&systems, inits.clone(), &all).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.rounds, 200);
        assert!(out.results[8].converged);
        assert!(!out.results[9].converged);
        assert!((out.converged_fraction() - 0.9).abs() < 1e-15);

        // 7 of 10 converge: below 0.8, rejected.
        systems[0] = Sys::Q(Quadratic { c: 2.0 });
        systems[8] = Sys::Q(Quadratic { c: 3.0 });
        let out = batched_newton(&systems, inits, &plain()).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.results.iter().filter(|r| r.converged).count(), 7);
    }

    #[test]
    fn acceptance_arithmetic() {
        assert!(batch_accepted(8, 10, 0.8));
        assert!(!batch_accepted(7, 10, 0.8));
        assert!(batch_accepted(4, 5, 0.8));
        assert!(!batch_accepted(3, 5, 0.8));
        assert!(!batch_accepted(0, 0, 0.8));
    }

    fn random_residual(p_free: usize, zeta_scale: f64, rng: &mut ChaCha8Rng) -> ResidualValues {
        use rand::Rng;
        let n_fixed = 2;
        let p = p_free + n_fixed;
        let graph = ReducedGraph::new(p);
        let m1 = {
            let b = DenseMatrix::from_fn(graph.n_edges(), graph.n_edges(), |_, _| rng.random_range(-1.0..1.0));
            b.tr_matmul(&b).unwrap().add(&DenseMatrix::identity(graph.n_edges())).unwrap()
        };
        let k = graph.d0.tr_matmul(&m1.matmul(&graph.d0).unwrap()).unwrap();
        let idx: Vec<usize> = (0..p_free).collect();
        let zeta = crate::flux::compute_zeta(&k.submatrix(&idx, &idx), (p as f64).sqrt(), 1.0, 0.99).unwrap();
        let cfg = FluxConfig::default();
        let cap = cfg.amplitude_cap(zeta / 2.0) * zeta_scale;
        let tape = Tape::new();
        let d = 4;
        let bl = |m: DenseMatrix| {
            let v = bounded_linear(&tape, tape.constant(m)).unwrap();
            tape.value(v).clone()
        };
        let rand_m = |r: usize, c: usize, rng: &mut ChaCha8Rng| DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0));
        let factor = tape.constant(rand_m(graph.n_edges(), 3, rng));
        let h = hodge_from_factor(&tape, factor, cfg.eps_h).unwrap();
        let h = tape.value(h).clone();
        let flux = FluxValues {
            pi: bl(rand_m(1, d, rng)),
            a: bl(rand_m(2 * d, d, rng)),
            b: bl(rand_m(2 * d, d, rng)),
            c: bl(rand_m(d, d, rng)),
            beta: cap,
            gamma: cap,
            h,
        };
        ResidualValues {
            k: vec![k],
            flux,
            fixed: DenseMatrix::column_vector(&[1.5, 0.0]),
            epsilon: 1.0,
            n_free: p_free,
            mean_channel: true,
            graph,
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let sys = random_residual(5, 1.0, &mut rng);
            let u = random_init(5, &mut rng);
            let (_, j) = sys.evaluate(&u).unwrap();
            let h = 1e-6;
            for l in 0..5 {
                let mut up = u.clone();
                up[l] += h;
                let mut um = u.clone();
                um[l] -= h;
                let gp = sys.residual(&up).unwrap();
                let gm = sys.residual(&um).unwrap();
                for k in 0..5 {
                    let fd = (gp[k] - gm[k]) / (2.0 * h);
                    assert!((fd - j[(k, l)]).abs() <= 1e-6 * j[(k, l)].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn zero_flux_is_linear_poisson() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sys = random_residual(4, 1.0, &mut rng);
        sys.flux.beta = 0.0;
        sys.flux.gamma = 0.0;
        let (_, j) = sys.evaluate(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        assert!(j.max_abs_diff(&sys.k[0].submatrix(&idx, &idx)).unwrap() == 0.0);
        let r = newton_solve(&sys, random_init(4, &mut rng), &plain()).unwrap();
        assert!(r.converged && r.iterations == 1);

        // Linear flux channel only: still affine, one step.
        sys.flux.beta = 0.05;
        let r = newton_solve(&sys, random_init(4, &mut rng), &plain()).unwrap();
        assert!(r.converged && r.iterations == 1);
    }

    #[test]
    fn unique_root_under_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let sys = random_residual(6, 1.0, &mut rng);
            let first = newton_solve(&sys, random_init(6, &mut rng), &plain()).unwrap();
            assert!(first.converged && first.residual_norm <= 1e-6);
            for _ in 0..4 {
                let other = newton_solve(&sys, random_init(6, &mut rng), &plain()).unwrap();
                assert!(other.converged);
                let d: f64 = first.u.iter().zip(&other.u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d <= 1e-5, "distance {d}");
            }
            let div = sys.flux_divergence(&first.u).unwrap();
            assert!(div.sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn adjoint_matches_linear_closed_form() {
        // G(u) = A u − b(θ) with b = θ·c; L = ½‖u‖². u = θ A⁻¹c, so
        // dL/dθ = θ ‖A⁻¹c‖².
        let a = DenseMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]);
        let c = [1.0, -2.0];
        let theta = 0.7;
        let tape = Tape::new();
        let th = tape.leaf(DenseMatrix::scalar(theta));
        let sys = Affine { a: a.clone(), b: c.iter().map(|v| theta * v).collect() };
        let sol = newton_solve(&sys, vec![0.0, 0.0], &plain()).unwrap();
        let u = tape.constant(DenseMatrix::column_vector(&sol.u));
        let g = tape
            .sub(
                tape.matmul(tape.constant(a.clone()), u).unwrap(),
                tape.scale_var(tape.constant(DenseMatrix::column_vector(&c)), th).unwrap(),
            )
            .unwrap();
        let loss = tape.scale(tape.sum(tape.mul(u, u).unwrap()).unwrap(), 0.5).unwrap();
        let lambda = adjoint_lambda(&sol.jacobian, &sol.u).unwrap();
        let obj = adjoint_objective(&tape, loss, g, &lambda).unwrap();
        let grad = tape.backward(obj).unwrap().wrt(th)[(0, 0)];
        let ainv_c = Lu::factor(&a).unwrap().solve(&c);
        let expect = theta * norm2(&ainv_c).powi(2);
        assert!((grad - expect).abs() <= 1e-12 * expect.abs());

        let zero = adjoint_lambda(&sol.jacobian, &[0.0, 0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let singular = adjoint_lambda(&DenseMatrix::zeros(2, 2), &[1.0, 0.0]);
        assert!(matches!(singular, Err(SolverError::SingularJacobian { .. })));
    }
}
