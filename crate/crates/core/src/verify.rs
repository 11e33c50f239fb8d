//! Structure checks on one sample: partition of unity, commuting
//! projection, stiffness consistency, conservation, boundary exactness,
//! Lipschitz certificate and the contraction factor.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::dirichlet_values;
use crate::feec::{stiffness_identity_check, FineOperators};
use crate::flux::{complete_incidence_norm, tau, FluxConfig};
use crate::linalg::{DenseMatrix, Lu};
use crate::mesh::Mesh;
use crate::model::{reconstruct_values, GeoNew, ModelError, SampleContext};
use crate::nn::module_rng;
use crate::reduced::{complete_graph_incidence, edge_lift, projection_identity_deviation, BoundaryLayout, DirichletData};
use crate::solver::{newton_solve, random_init, NonlinearSystem, ResidualValues, SolveConfig, SolveResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, relation: Relation, bound: f64) -> Self {
        let pass = match relation {
            Relation::AtMost => value <= bound,
            Relation::Below => value < bound,
            Relation::AtLeast => value >= bound,
        };
        Self { name: name.to_string(), value, relation, bound, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub n_nodes: usize,
    pub p_total: usize,
    pub zeta: f64,
    pub tau: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Report {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Random point pairs for the empirical Lipschitz estimate.
    pub n_pairs: usize,
    /// Random states for the conservation check.
    pub n_states: usize,
    pub seed: u64,
    pub solve: SolveConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { n_pairs: 1000, n_states: 100, seed: 0, solve: SolveConfig::default() }
    }
}

/// Values the checks are computed from. `w` may be arbitrary (fault
/// injection); nothing here assumes it is stochastic.
pub struct StructureInputs<'a> {
    pub mesh: &'a Mesh,
    pub fine: &'a FineOperators,
    pub boundary: &'a DirichletData,
    /// Per-field partition, `P_total × N`.
    pub w: &'a [DenseMatrix],
    pub system: &'a ResidualValues,
    pub solve: &'a SolveResult,
    pub flux: &'a FluxConfig,
    /// `ζ` used for the amplitude caps.
    pub zeta: f64,
}

/// Largest `|Σ_i W_ij − 1|`, or infinity if any entry is negative or not
/// finite.
pub fn partition_of_unity_defect(w: &DenseMatrix) -> f64 {
    if w.as_slice().iter().any(|&v| !(v >= 0.0)) {
        return f64::INFINITY;
    }
    w.col_sums().into_iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

/// `‖δ0ᵀ(W1 M1' W1ᵀ)δ0 − W K' Wᵀ‖_max`: the reduced stiffness equals the
/// Galerkin projection of the fine one.
pub fn reduced_stiffness_deviation(fine: &FineOperators, w: &DenseMatrix) -> f64 {
    let w1 = edge_lift(w, &fine.edges);
    let m1 = fine.m1.congruence(&w1).expect("edge lift has E columns");
    let d0 = complete_graph_incidence(w.rows());
    let k = d0.tr_matmul(&m1.matmul(&d0).expect("sizes")).expect("sizes");
    let galerkin = fine.k.congruence(w).expect("partition has N columns");
    k.max_abs_diff(&galerkin).expect("same shape")
}

/// `max ‖𝓕(U) − 𝓕(V)‖ / ‖U − V‖` over random full states: half independent
/// pairs, half nearby pairs.
pub fn empirical_lipschitz(system: &ResidualValues, n_pairs: usize, rng: &mut impl Rng) -> crate::flux::Result<f64> {
    let (p, f) = (system.graph.p, system.n_fields());
    let mut normal = |scale: f64| DenseMatrix::from_fn(p, f, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let mut best = 0.0f64;
    for k in 0..n_pairs {
        let u = normal(1.0);
        let v = if k % 2 == 0 { normal(1.0) } else { u.add(&normal(1e-3)).expect("same shape") };
        let du = u.sub(&v).expect("same shape").frobenius_norm();
        if du == 0.0 {
            continue;
        }
        let fu = system.flux.evaluate(&system.graph, system.mean_channel, &u)?;
        let fv = system.flux.evaluate(&system.graph, system.mean_channel, &v)?;
        best = best.max(fu.sub(&fv).expect("same shape").frobenius_norm() / du);
    }
    Ok(best)
}

/// Reciprocal 1-norm condition number of `j`, 0 when singular.
pub fn reciprocal_condition(j: &DenseMatrix) -> f64 {
    let Ok(lu) = Lu::factor(j) else {
        return 0.0;
    };
    let n = j.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        inv.set_column(c, &lu.solve(&e));
    }
    let norm1 = |m: &DenseMatrix| m.transpose().inf_norm();
    let rc = 1.0 / (norm1(j) * norm1(&inv));
    if rc.is_finite() {
        rc
    } else {
        0.0
    }
}

pub fn structure_report(inp: &StructureInputs, opts: &VerifyOptions) -> Result<Report, ModelError> {
    let mut checks = Vec::new();
    let w0 = &inp.w[0];
    let pou = inp.w.iter().map(partition_of_unity_defect).fold(0.0, f64::max);
    checks.push(Check::new("partition_of_unity", pou, Relation::AtMost, 1e-12));
    let proj = inp.w.iter().map(|w| projection_identity_deviation(inp.fine, w)).fold(0.0, f64::max);
    checks.push(Check::new("projection_identity", proj, Relation::AtMost, 1e-10));
    let stiff = inp.w.iter().map(|w| reduced_stiffness_deviation(inp.fine, w)).fold(0.0, f64::max);
    checks.push(Check::new("reduced_stiffness_identity", stiff, Relation::AtMost, 1e-10));
    checks.push(Check::new("fine_stiffness_identity", stiffness_identity_check(inp.mesh, inp.fine), Relation::AtMost, 1e-10));

    let mut rng = module_rng(opts.seed, "verify");
    let mut conservation = 0.0f64;
    for _ in 0..opts.n_states {
        let u = random_init(inp.system.dim(), &mut rng);
        let div = inp.system.flux_divergence(&u)?;
        for s in div.col_sums() {
            conservation = conservation.max(s.abs());
        }
    }
    checks.push(Check::new("conservation", conservation, Relation::AtMost, 1e-12));

    let u_fine = reconstruct_values(inp.w, &inp.system.full_state(&inp.solve.u));
    let data = dirichlet_values(inp.mesh, inp.boundary);
    let mut boundary_err = 0.0f64;
    for (node, vals) in &data {
        for (f, v) in vals.iter().enumerate() {
            boundary_err = boundary_err.max((u_fine[(*node, f)] - v).abs());
        }
    }
    checks.push(Check::new("dirichlet_exactness", boundary_err, Relation::AtMost, 1e-14));

    let zeta_eff = 0.5 * inp.zeta;
    let certified = inp.system.flux.certified_lipschitz(inp.flux.eps_h);
    checks.push(Check::new("lipschitz_certified", certified, Relation::AtMost, zeta_eff * (1.0 + 1e-12)));
    let empirical = empirical_lipschitz(inp.system, opts.n_pairs, &mut rng)?;
    checks.push(Check::new("lipschitz_empirical", empirical, Relation::AtMost, certified * (1.0 + 1e-9)));

    let p_total = w0.rows();
    let free: Vec<usize> = (0..inp.system.n_free).collect();
    let tau = inp
        .system
        .k
        .iter()
        .map(|k| tau(certified, &k.submatrix(&free, &free), complete_incidence_norm(p_total), inp.flux.epsilon))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check::new("tau", tau, Relation::Below, 1.0));
    checks.push(Check::new("newton_residual", inp.solve.residual_norm, Relation::AtMost, opts.solve.tol));
    checks.push(Check::new("jacobian_conditioning", reciprocal_condition(&inp.solve.jacobian), Relation::AtLeast, 1e-12));

    let pass = checks.iter().all(|c| c.pass);
    Ok(Report { n_nodes: inp.mesh.n_nodes(), p_total, zeta: inp.zeta, tau, checks, pass })
}

/// Runs the model on one geometry with per-sample `ζ` and checks the result.
pub fn verify_model(
    model: &GeoNew,
    mesh: &Mesh,
    fine: &FineOperators,
    features: DenseMatrix,
    boundary: &DirichletData,
    opts: &VerifyOptions,
) -> Result<Report, ModelError> {
    let layout = BoundaryLayout::new(mesh, boundary)?;
    let ctx = SampleContext::new(fine, features, layout);
    let anchors = model.anchors(ctx.n_nodes(), "verify");
    let sf = model.forward(&ctx, &anchors, false, &|z| z)?;
    let mut rng = module_rng(opts.seed, "verify-init");
    let dim = sf.system.dim();
    let solve = newton_solve(&sf.system, random_init(dim, &mut rng), &opts.solve)?;
    let w = sf.partitions();
    let inputs = StructureInputs {
        mesh,
        fine,
        boundary,
        w: &w,
        system: &sf.system,
        solve: &solve,
        flux: &model.config.flux,
        zeta: sf.fwd.zeta,
    };
    structure_report(&inputs, opts)
}
