//! Residual checks of the optimality identities, each reported with its
//! tolerance, and suite runners over tree and ensemble carriers.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_cost_kernel, solve_cost_kernel_tree, KernelScheme, Projection, RegressionBasis};
use crate::error::{Result, SlqError};
use crate::lattice::{closed_loop, cost_to_go, discrete_cost, dp_solve, forward_dynamics, TreeModel, TreeProcess};
use crate::model::{LQProblem, Mat, Vector};
use crate::operators::{
    apply_n, convexity_probe, inner_product, l_gram, random_unit_control, solve_open_loop_cg, ControlLayout,
    ControlVector, Fbsde, OperatorContext,
};
use crate::riccati::{solve_riccati_difference, solve_riccati_ode, solve_sre_tree};
use crate::sde::{generate_ensemble, CostEstimate, ControlPolicy, GainSchedule};

/// One measured quantity. Without a tolerance it is informational.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub name: String,
    pub value: f64,
    pub tolerance: Option<f64>,
}

impl Residual {
    pub fn bounded(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance: Some(tolerance),
        }
    }

    pub fn info(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance: None,
        }
    }

    /// `value <= tolerance`; NaN never passes.
    pub fn passed(&self) -> bool {
        match self.tolerance {
            Some(t) => self.value <= t,
            None => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Failed, as declared.
    ExpectedFailure,
    /// Declared to fail but passed: the check lacks power on this fixture.
    UnexpectedPass,
}

impl Outcome {
    pub fn acceptable(self) -> bool {
        matches!(self, Outcome::Pass | Outcome::ExpectedFailure)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "FAIL",
            Outcome::ExpectedFailure => "expected-failure",
            Outcome::UnexpectedPass => "UNEXPECTED-PASS",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Tree depth or ensemble size and seed.
    pub carrier: String,
    pub residuals: Vec<Residual>,
    /// Solver error that prevented the check from completing.
    pub error: Option<String>,
    pub expected_failure: bool,
}

impl CheckReport {
    fn new(name: &str, carrier: String, residuals: Vec<Residual>) -> Self {
        Self {
            name: name.into(),
            carrier,
            residuals,
            error: None,
            expected_failure: false,
        }
    }

    pub fn from_error(name: &str, carrier: String, err: &SlqError) -> Self {
        Self {
            name: name.into(),
            carrier,
            residuals: Vec::new(),
            error: Some(err.to_string()),
            expected_failure: false,
        }
    }

    pub fn expecting_failure(mut self, expected: bool) -> Self {
        self.expected_failure = expected;
        self
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.residuals.iter().all(Residual::passed)
    }

    pub fn outcome(&self) -> Outcome {
        match (self.passed(), self.expected_failure) {
            (true, false) => Outcome::Pass,
            (false, false) => Outcome::Fail,
            (false, true) => Outcome::ExpectedFailure,
            (true, true) => Outcome::UnexpectedPass,
        }
    }

    pub fn residual(&self, name: &str) -> Option<f64> {
        self.residuals.iter().find(|r| r.name == name).map(|r| r.value)
    }

    /// The first bounded residual, the one the check is named after.
    pub fn primary(&self) -> Option<&Residual> {
        self.residuals.iter().find(|r| r.tolerance.is_some())
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} ({})", self.outcome(), self.name, self.carrier)?;
        if let Some(e) = &self.error {
            write!(f, ": {e}")?;
        }
        for r in &self.residuals {
            match r.tolerance {
                Some(t) => write!(f, "\n    {} = {:.3e} (tol {:.1e})", r.name, r.value, t)?,
                None => write!(f, "\n    {} = {:.6e}", r.name, r.value)?,
            }
        }
        Ok(())
    }
}

/// Rows `check,carrier,residual,value,tolerance,passed,outcome,error`.
pub fn write_reports_csv<W: Write>(reports: &[CheckReport], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["check", "carrier", "residual", "value", "tolerance", "passed", "outcome", "error"])?;
    for r in reports {
        let outcome = r.outcome().to_string();
        let error = r.error.clone().unwrap_or_default();
        if r.residuals.is_empty() {
            out.write_record([&r.name, &r.carrier, "", "", "", "false", &outcome, &error])?;
        }
        for res in &r.residuals {
            out.write_record([
                r.name.as_str(),
                r.carrier.as_str(),
                res.name.as_str(),
                &format!("{:.17e}", res.value),
                &res.tolerance.map(|t| format!("{t:e}")).unwrap_or_default(),
                if res.passed() { "true" } else { "false" },
                &outcome,
                &error,
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Tolerances of every check. Tree values are absolute because the tree
/// oracle is exact; ensemble checks add `3 * stderr` to the stated allowance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub cg: f64,
    pub stationarity: f64,
    pub value_representation: f64,
    pub closed_loop_path: f64,
    pub closed_loop_cost: f64,
    pub closed_loop_cost_sre: f64,
    pub yx_identity: f64,
    pub condition_limit: f64,
    pub optimality_principle: f64,
    pub perturbation: f64,
    pub gap_law: f64,
    pub self_adjoint: f64,
    pub linearity: f64,
    pub quadratic_form: f64,
    pub l_bound_spread: f64,
    pub monte_carlo: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            cg: 1e-12,
            stationarity: 1e-8,
            value_representation: 0.05,
            closed_loop_path: 1e-8,
            closed_loop_cost: 1e-6,
            closed_loop_cost_sre: 0.05,
            yx_identity: 0.05,
            condition_limit: 1e12,
            optimality_principle: 1e-9,
            perturbation: 1e-9,
            gap_law: 1e-8,
            self_adjoint: 1e-10,
            linearity: 1e-10,
            quadratic_form: 1e-9,
            l_bound_spread: 2.0,
            monte_carlo: 0.02,
        }
    }
}

fn tree_model(ctx: &OperatorContext) -> Result<&TreeModel> {
    match ctx {
        OperatorContext::Tree(model) => Ok(model),
        OperatorContext::Ensemble { .. } => Err(SlqError::Config("this check needs the tree carrier".into())),
    }
}

/// Largest Euclidean norm over all stored m-vectors.
fn max_pointwise_norm(u: &ControlVector) -> f64 {
    let m = u.layout.m();
    u.values
        .chunks(m)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `sup |B'Ybar + D'Z + SX + Ru|` over nodes (tree) or paths and steps.
pub fn check_stationarity(ctx: &OperatorContext, xi: &Vector, u: &ControlVector, tol: f64) -> Result<CheckReport> {
    let field = ctx.gradient(xi, u)?;
    Ok(CheckReport::new(
        "stationarity",
        ctx.describe(),
        vec![
            Residual::bounded("sup_stationarity", max_pointwise_norm(&field), tol),
            Residual::info("rms_stationarity", field.norm() / ctx.problem().horizon.sqrt()),
        ],
    ))
}

/// `|J(u*) - xi'P xi|` and `|J(u*) - <Y*(t0), xi>|`. On ensembles the
/// tolerance grows by three standard errors of the cost.
pub fn check_value_representation(
    ctx: &OperatorContext,
    xi: &Vector,
    u_star: &ControlVector,
    kernel: &Mat,
    tol: f64,
) -> Result<CheckReport> {
    let cost = ctx.cost(xi, u_star)?;
    let fbsde = ctx.solve_fbsde(xi, u_star)?;
    let adjoint = fbsde.initial_adjoint().dot(xi);
    let quadratic = xi.dot(&(kernel * xi));
    let allowed = tol + 3.0 * cost.stderr;
    Ok(CheckReport::new(
        "value_representation",
        ctx.describe(),
        vec![
            Residual::bounded("cost_vs_kernel", (cost.mean - quadratic).abs(), allowed),
            Residual::bounded("cost_vs_adjoint", (cost.mean - adjoint).abs(), allowed),
            Residual::info("cost", cost.mean),
            Residual::info("cost_stderr", cost.stderr),
            Residual::info("kernel_value", quadratic),
            Residual::info("adjoint_value", adjoint),
        ],
    ))
}

/// Compares an open-loop optimum with the feedback `u = Theta X` on the tree.
/// `path_tol = None` reports the pathwise gap without bounding it.
pub fn check_closed_loop_agreement(
    ctx: &OperatorContext,
    xi: &Vector,
    u_star: &ControlVector,
    gain: &TreeProcess<Mat>,
    path_tol: Option<f64>,
    cost_tol: f64,
) -> Result<CheckReport> {
    let model = tree_model(ctx)?;
    let (_, feedback) = closed_loop(model, gain, xi);
    let feedback = ControlVector::from_tree(ctx.layout(), &feedback);
    let diff = u_star.combine(1.0, &feedback, -1.0)?;
    let path_gap = max_pointwise_norm(&diff);
    let cost_gap = (ctx.cost(xi, u_star)?.mean - ctx.cost(xi, &feedback)?.mean).abs();
    let path = match path_tol {
        Some(t) => Residual::bounded("max_control_gap", path_gap, t),
        None => Residual::info("max_control_gap", path_gap),
    };
    Ok(CheckReport::new(
        "closed_loop_agreement",
        ctx.describe(),
        vec![path, Residual::bounded("cost_gap", cost_gap, cost_tol)],
    ))
}

/// Solves the open-loop problem from each unit vector, stacks the optimal
/// states and adjoints into matrices `X`, `Y` and compares `Y X^{-1}` with
/// `kernel` at every node. Nodes with `cond(X) > condition_limit` are counted
/// as singular and fail the check.
pub fn check_yx_identity(
    ctx: &OperatorContext,
    kernel: &TreeProcess<Mat>,
    tol: &Tolerances,
    max_iter: usize,
) -> Result<CheckReport> {
    let model = tree_model(ctx)?;
    let n = ctx.problem().n();
    let mut columns = Vec::with_capacity(n);
    for i in 0..n {
        let mut e = Vector::zeros(n);
        e[i] = 1.0;
        let cg = solve_open_loop_cg(ctx, &e, tol.cg, max_iter)?;
        match ctx.solve_fbsde(&e, &cg.control)? {
            Fbsde::Tree { x, y, .. } => columns.push((x, y)),
            Fbsde::Ensemble { .. } => unreachable!("tree carrier"),
        }
    }
    let mut worst = 0.0f64;
    let mut min_det = f64::INFINITY;
    let mut max_cond = 0.0f64;
    let mut singular = 0usize;
    for k in 0..=model.depth() {
        for j in 0..1usize << k {
            let mut xm = Mat::zeros(n, n);
            let mut ym = Mat::zeros(n, n);
            for (i, (x, y)) in columns.iter().enumerate() {
                xm.set_column(i, x.get(k, j));
                ym.set_column(i, y.get(k, j));
            }
            let sv = xm.singular_values();
            let cond = sv.max() / sv.min();
            min_det = min_det.min(xm.determinant().abs());
            max_cond = max_cond.max(cond);
            if !(cond <= tol.condition_limit) {
                singular += 1;
                continue;
            }
            let inv = xm.try_inverse().expect("well-conditioned");
            worst = worst.max((ym * inv - kernel.get(k, j)).norm());
        }
    }
    Ok(CheckReport::new(
        "yx_identity",
        ctx.describe(),
        vec![
            Residual::bounded("max_kernel_gap", worst, tol.yx_identity),
            Residual::bounded("singular_nodes", singular as f64, 0.0),
            Residual::info("min_abs_det", min_det),
            Residual::info("max_condition", max_cond),
        ],
    ))
}

/// Re-solves every subtree rooted at level `k_mid` by dynamic programming
/// from the state reached under `u` and compares with the cost-to-go of `u`.
pub fn check_optimality_principle(
    ctx: &OperatorContext,
    xi: &Vector,
    u: &ControlVector,
    k_mid: usize,
    tol: f64,
) -> Result<CheckReport> {
    let model = tree_model(ctx)?;
    if k_mid >= model.depth() {
        return Err(SlqError::Config(format!(
            "mid level {k_mid} must be below the depth {}",
            model.depth()
        )));
    }
    let controls = u.to_tree();
    let states = forward_dynamics(model, &controls, xi);
    let to_go = cost_to_go(model, &states, &controls);
    let mut worst = 0.0f64;
    let mut total = 0.0;
    for j in 0..1usize << k_mid {
        let sub = dp_solve(&model.subtree(k_mid, j)?)?;
        let gap = to_go.get(k_mid, j) - sub.value(states.get(k_mid, j));
        worst = worst.max(gap.abs());
        total += gap;
    }
    Ok(CheckReport::new(
        "optimality_principle",
        format!("{}, level {k_mid}", ctx.describe()),
        vec![
            Residual::bounded("max_subtree_gap", worst, tol),
            Residual::info("mean_subtree_gap", total / (1u64 << k_mid) as f64),
        ],
    ))
}

/// The control whose optimality is being probed.
#[derive(Clone, Debug)]
pub enum Candidate {
    OpenLoop(ControlVector),
    /// Ensemble carriers only.
    Feedback(GainSchedule),
}

pub const PERTURBATION_SIZES: [f64; 3] = [0.01, 0.1, 1.0];

/// `J(u* + eps v) - J(u*)` over random adapted unit `v` and
/// `eps in {0.01, 0.1, 1}`. Passes when no gap is below `-tol` (tree) or
/// `-3 stderr` of the common-random-number difference (ensemble). On the
/// tree each gap is also compared with `eps^2 [[N v, v]]`.
pub fn check_cost_perturbation(
    ctx: &OperatorContext,
    xi: &Vector,
    candidate: &Candidate,
    n_perturb: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    let mut worst_violation = f64::NEG_INFINITY;
    let mut worst_law = 0.0f64;
    match (ctx, candidate) {
        (OperatorContext::Tree(_), Candidate::OpenLoop(u_star)) => {
            let base = ctx.cost(xi, u_star)?.mean;
            for s in 0..n_perturb {
                let v = random_unit_control(ctx, s % 10 == 9, &mut rng);
                let curvature = inner_product(&apply_n(ctx, &v)?, &v)?;
                for eps in PERTURBATION_SIZES {
                    let gap = ctx.cost(xi, &u_star.combine(1.0, &v, eps)?)?.mean - base;
                    min_gap = min_gap.min(gap);
                    worst_violation = worst_violation.max(-gap);
                    worst_law = worst_law.max((gap - eps * eps * curvature).abs());
                }
            }
            let trials = (n_perturb * PERTURBATION_SIZES.len()) as f64;
            Ok(CheckReport::new(
                "cost_perturbation",
                ctx.describe(),
                vec![
                    Residual::bounded("negative_gap", worst_violation.max(0.0), tol.perturbation),
                    Residual::bounded("gap_law", worst_law, tol.gap_law),
                    Residual::info("min_gap", min_gap),
                    Residual::info("trials", trials),
                ],
            ))
        }
        (OperatorContext::Ensemble { .. }, _) => {
            let layout = ctx.layout();
            let (base_policy, perturbed): (ControlPolicy, Box<dyn Fn(ControlVector) -> ControlPolicy>) =
                match candidate {
                    Candidate::OpenLoop(u) => {
                        let u = u.clone();
                        (
                            ControlPolicy::OpenLoop(u.to_table()),
                            Box::new(move |dv: ControlVector| {
                                ControlPolicy::OpenLoop(u.combine(1.0, &dv, 1.0).expect("same layout").to_table())
                            }),
                        )
                    }
                    Candidate::Feedback(gain) => {
                        let gain = gain.clone();
                        (
                            ControlPolicy::Feedback {
                                gain: gain.clone(),
                                offset: None,
                            },
                            Box::new(move |dv: ControlVector| ControlPolicy::Feedback {
                                gain: gain.clone(),
                                offset: Some(dv.to_table()),
                            }),
                        )
                    }
                };
            let base = ctx.path_costs(xi, &base_policy)?;
            let mut worst_z = f64::NEG_INFINITY;
            for s in 0..n_perturb {
                let v = random_unit_control(ctx, s % 10 == 9, &mut rng);
                debug_assert_eq!(v.layout, layout);
                for eps in PERTURBATION_SIZES {
                    let costs = ctx.path_costs(xi, &perturbed(v.scaled(eps)))?;
                    let diffs: Vec<f64> = costs.iter().zip(&base).map(|(a, b)| a - b).collect();
                    let est = CostEstimate::from_samples(&diffs);
                    min_gap = min_gap.min(est.mean);
                    worst_violation = worst_violation.max(-est.mean - 3.0 * est.stderr);
                    if est.stderr > 0.0 {
                        worst_z = worst_z.max(-est.mean / est.stderr);
                    }
                }
            }
            Ok(CheckReport::new(
                "cost_perturbation",
                ctx.describe(),
                vec![
                    Residual::bounded("gap_below_3_stderr", worst_violation.max(0.0), 0.0),
                    Residual::info("min_gap", min_gap),
                    Residual::info("worst_negative_z", worst_z),
                    Residual::info("trials", (n_perturb * PERTURBATION_SIZES.len()) as f64),
                ],
            ))
        }
        (OperatorContext::Tree(_), Candidate::Feedback(_)) => Err(SlqError::Config(
            "tree perturbation checks take an open-loop control".into(),
        )),
    }
}

/// `|[[N u, v]] - [[u, N v]]| / (|u| |v|)` and the pointwise linearity gap
/// over random pairs.
pub fn check_self_adjointness(ctx: &OperatorContext, pairs: usize, seed: u64, tol: &Tolerances) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut asym = 0.0f64;
    let mut lin = 0.0f64;
    for s in 0..pairs {
        let u = random_unit_control(ctx, s % 10 == 9, &mut rng);
        let v = random_unit_control(ctx, false, &mut rng);
        let (nu, nv) = (apply_n(ctx, &u)?, apply_n(ctx, &v)?);
        let gap = (inner_product(&nu, &v)? - inner_product(&u, &nv)?).abs();
        asym = asym.max(gap / (u.norm() * v.norm()));
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let combined = apply_n(ctx, &u.combine(a, &v, b)?)?;
        let expected = nu.combine(a, &nv, b)?;
        let scale = expected.max_abs().max(1.0);
        lin = lin.max(combined.combine(1.0, &expected, -1.0)?.max_abs() / scale);
    }
    Ok(CheckReport::new(
        "self_adjointness",
        ctx.describe(),
        vec![
            Residual::bounded("relative_asymmetry", asym, tol.self_adjoint),
            Residual::bounded("linearity_gap", lin, tol.linearity),
        ],
    ))
}

fn random_state(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Direct discrete cost against `[[N u, u]] + 2 [[L xi, u]] + <M xi, xi>`
/// with `M` from the exact tree kernel.
pub fn check_quadratic_form(ctx: &OperatorContext, pairs: usize, seed: u64, tol: f64) -> Result<CheckReport> {
    let model = tree_model(ctx)?;
    let kernel = solve_cost_kernel_tree(model, KernelScheme::Exact);
    let m0 = kernel.kernel.root();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ctx.problem().n();
    let mut worst = 0.0f64;
    for s in 0..pairs {
        let xi = random_state(n, &mut rng);
        let scale: f64 = 1.0 + rng.random::<f64>() * 2.0;
        let u = random_unit_control(ctx, s % 10 == 9, &mut rng).scaled(scale);
        let direct = discrete_cost(model, &xi, &u.to_tree());
        let lxi = crate::operators::apply_l(ctx, &xi)?;
        let form = inner_product(&apply_n(ctx, &u)?, &u)? + 2.0 * inner_product(&lxi, &u)? + xi.dot(&(m0 * &xi));
        worst = worst.max((direct - form).abs());
    }
    Ok(CheckReport::new(
        "quadratic_form",
        ctx.describe(),
        vec![Residual::bounded("max_cost_gap", worst, tol)],
    ))
}

/// Sampled lower bound of `[[N u, u]] / [[u, u]]`; a negative sample refutes
/// uniform convexity.
pub fn check_convexity(ctx: &OperatorContext, samples: usize, seed: u64) -> Result<CheckReport> {
    let cert = convexity_probe(ctx, samples, seed)?;
    Ok(CheckReport::new(
        "convexity",
        ctx.describe(),
        vec![
            Residual::bounded("negated_delta", -cert.delta, 0.0),
            Residual::info("delta_hat", cert.delta),
            Residual::info("samples", samples as f64),
        ],
    ))
}

/// Conjugate gradient from `xi`: converged relative residual, iteration
/// count, and curvature failures as errors.
pub fn check_cg(ctx: &OperatorContext, xi: &Vector, tol: f64, max_iter: usize) -> Result<CheckReport> {
    let sol = solve_open_loop_cg(ctx, xi, tol, max_iter)?;
    let relative = if sol.rhs_norm > 0.0 { sol.residual / sol.rhs_norm } else { 0.0 };
    let min_curvature = sol.trace.iter().map(|s| s.curvature).fold(f64::INFINITY, f64::min);
    Ok(CheckReport::new(
        "cg",
        ctx.describe(),
        vec![
            // Allow for the recomputed residual sitting a little above the recursive one.
            Residual::bounded("relative_residual", relative, 100.0 * tol),
            Residual::bounded("energy_increase", if sol.energy_monotone() { 0.0 } else { 1.0 }, 0.0),
            Residual::info("iterations", sol.iterations as f64),
            Residual::info("min_curvature", min_curvature),
        ],
    ))
}

/// `sup_xi [[L xi, L xi]] / |xi|^2` on trees of each depth; the spread
/// `max / min` across depths must stay bounded.
pub fn check_l_boundedness(problem: &LQProblem, depths: &[usize], tol: f64) -> Result<CheckReport> {
    let mut residuals = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &d in depths {
        let ctx = OperatorContext::tree(TreeModel::build(d, problem)?);
        let gram = l_gram(&ctx)?;
        let ratio = gram.symmetric_eigenvalues().max();
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        residuals.push(Residual::info(&format!("ratio_depth_{d}"), ratio));
    }
    let spread = if hi == 0.0 { 1.0 } else { hi / lo };
    residuals.insert(0, Residual::bounded("ratio_spread", spread, tol));
    let carrier = format!(
        "trees depth {}..{}",
        depths.iter().min().copied().unwrap_or(0),
        depths.iter().max().copied().unwrap_or(0)
    );
    Ok(CheckReport::new("l_boundedness", carrier, residuals))
}

/// `J(t0, xi; 0)` against `<M(t0) xi, xi>`. On ensembles `M` comes from the
/// regression kernel solve and the tolerance is `allowance + 3 stderr`; on
/// the tree both sides are exact.
pub fn check_uncontrolled_cost(
    ctx: &OperatorContext,
    xi: &Vector,
    scheme: KernelScheme,
    allowance: f64,
) -> Result<CheckReport> {
    let cost = ctx.cost(xi, &ControlVector::zeros(ctx.layout()))?;
    let m0 = match ctx {
        OperatorContext::Tree(model) => solve_cost_kernel_tree(model, scheme).kernel.root().clone(),
        OperatorContext::Ensemble {
            problem,
            ensemble,
            projection,
        } => solve_cost_kernel(problem, ensemble, *projection, scheme)?.mean_kernel(0),
    };
    let quadratic = xi.dot(&(&m0 * xi));
    Ok(CheckReport::new(
        "uncontrolled_cost",
        ctx.describe(),
        vec![
            Residual::bounded("cost_vs_kernel", (cost.mean - quadratic).abs(), allowance + 3.0 * cost.stderr),
            Residual::info("cost", cost.mean),
            Residual::info("cost_stderr", cost.stderr),
            Residual::info("kernel_value", quadratic),
        ],
    ))
}

/// Monte Carlo cost of a feedback policy against a reference value.
pub fn check_feedback_value(
    ctx: &OperatorContext,
    xi: &Vector,
    gain: &GainSchedule,
    reference: f64,
    allowance: f64,
) -> Result<CheckReport> {
    let policy = ControlPolicy::Feedback {
        gain: gain.clone(),
        offset: None,
    };
    let est = CostEstimate::from_samples(&ctx.path_costs(xi, &policy)?);
    Ok(CheckReport::new(
        "feedback_value",
        ctx.describe(),
        vec![
            Residual::bounded("cost_vs_reference", (est.mean - reference).abs(), allowance + 3.0 * est.stderr),
            Residual::info("cost", est.mean),
            Residual::info("cost_stderr", est.stderr),
            Residual::info("reference", reference),
        ],
    ))
}

/// Checks a suite can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Cg,
    Stationarity,
    ValueRepresentation,
    ClosedLoop,
    ClosedLoopSre,
    YxIdentity,
    OptimalityPrinciple,
    CostPerturbation,
    SelfAdjointness,
    QuadraticForm,
    Convexity,
    LBoundedness,
    UncontrolledCost,
    FeedbackValue,
}

impl CheckKind {
    pub const TREE: [CheckKind; 12] = [
        CheckKind::Cg,
        CheckKind::Stationarity,
        CheckKind::ValueRepresentation,
        CheckKind::ClosedLoop,
        CheckKind::ClosedLoopSre,
        CheckKind::YxIdentity,
        CheckKind::OptimalityPrinciple,
        CheckKind::CostPerturbation,
        CheckKind::SelfAdjointness,
        CheckKind::QuadraticForm,
        CheckKind::Convexity,
        CheckKind::LBoundedness,
    ];

    pub const ENSEMBLE: [CheckKind; 3] = [
        CheckKind::UncontrolledCost,
        CheckKind::FeedbackValue,
        CheckKind::CostPerturbation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Cg => "cg",
            CheckKind::Stationarity => "stationarity",
            CheckKind::ValueRepresentation => "value_representation",
            CheckKind::ClosedLoop => "closed_loop",
            CheckKind::ClosedLoopSre => "closed_loop_sre",
            CheckKind::YxIdentity => "yx_identity",
            CheckKind::OptimalityPrinciple => "optimality_principle",
            CheckKind::CostPerturbation => "cost_perturbation",
            CheckKind::SelfAdjointness => "self_adjointness",
            CheckKind::QuadraticForm => "quadratic_form",
            CheckKind::Convexity => "convexity",
            CheckKind::LBoundedness => "l_boundedness",
            CheckKind::UncontrolledCost => "uncontrolled_cost",
            CheckKind::FeedbackValue => "feedback_value",
        }
    }

    /// Whether the check needs the open-loop optimum (and so a convex problem).
    fn needs_optimum(self) -> bool {
        matches!(
            self,
            CheckKind::Stationarity
                | CheckKind::ValueRepresentation
                | CheckKind::ClosedLoop
                | CheckKind::ClosedLoopSre
                | CheckKind::OptimalityPrinciple
                | CheckKind::CostPerturbation
        )
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckKind {
    type Err = SlqError;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::TREE
            .iter()
            .chain(CheckKind::ENSEMBLE.iter())
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| SlqError::Config(format!("unknown check '{s}'")))
    }
}

/// Which control the optimum-dependent checks are run against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteControl {
    #[default]
    Optimal,
    /// `u = 0`; optimum-dependent checks should then fail.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSuiteOptions {
    pub depth: usize,
    pub xi: Vec<f64>,
    pub mid_level: usize,
    pub pairs: usize,
    pub perturbations: usize,
    pub probe_samples: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub bound_depths: Vec<usize>,
    pub control: SuiteControl,
    pub checks: Vec<CheckKind>,
    pub expected_failures: Vec<CheckKind>,
    pub tolerances: Tolerances,
}

impl Default for TreeSuiteOptions {
    fn default() -> Self {
        Self {
            depth: 10,
            xi: vec![1.0],
            mid_level: 5,
            pairs: 50,
            perturbations: 34,
            probe_samples: 500,
            seed: 0,
            max_iter: 5000,
            bound_depths: vec![6, 8, 10, 12, 14],
            control: SuiteControl::Optimal,
            checks: CheckKind::TREE.to_vec(),
            expected_failures: Vec::new(),
            tolerances: Tolerances::default(),
        }
    }
}

fn state_vector(xi: &[f64], n: usize) -> Result<Vector> {
    match xi.len() {
        1 if n > 1 => Ok(Vector::from_element(n, xi[0])),
        len if len == n => Ok(Vector::from_column_slice(xi)),
        len => Err(SlqError::Dimension(format!("initial state has length {len} but n = {n}"))),
    }
}

/// Results of a suite run in check order.
#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub reports: Vec<CheckReport>,
}

impl SuiteReport {
    /// True iff every check passed or failed as declared.
    pub fn acceptable(&self) -> bool {
        self.reports.iter().all(|r| r.outcome().acceptable())
    }

    pub fn get(&self, name: &str) -> Option<&CheckReport> {
        self.reports.iter().find(|r| r.name == name)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        let count = |o: Outcome| self.reports.iter().filter(|r| r.outcome() == o).count();
        out.push_str(&format!(
            "{} checks: {} pass, {} fail, {} expected failures, {} unexpected passes\n",
            self.reports.len(),
            count(Outcome::Pass),
            count(Outcome::Fail),
            count(Outcome::ExpectedFailure),
            count(Outcome::UnexpectedPass),
        ));
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_reports_csv(&self.reports, writer)
    }
}

/// Runs the selected checks on a tree of the configured depth. Solver errors
/// become failed reports; nothing is propagated except model construction.
pub fn run_tree_suite(problem: &LQProblem, opts: &TreeSuiteOptions) -> Result<SuiteReport> {
    let model = TreeModel::build(opts.depth, problem)?;
    let ctx = OperatorContext::tree(model.clone());
    let carrier = ctx.describe();
    let xi = state_vector(&opts.xi, problem.n())?;
    let tol = &opts.tolerances;
    let mut checks = opts.checks.clone();
    checks.sort();
    checks.dedup();

    let needs_optimum = checks.iter().any(|c| c.needs_optimum());
    let control: Option<std::result::Result<ControlVector, SlqError>> = needs_optimum.then(|| match opts.control {
        SuiteControl::Optimal => solve_open_loop_cg(&ctx, &xi, tol.cg, opts.max_iter).map(|s| s.control),
        SuiteControl::Zero => Ok(ControlVector::zeros(ctx.layout())),
    });
    let dp = dp_solve(&model);

    let mut reports = Vec::with_capacity(checks.len());
    for (i, &kind) in checks.iter().enumerate() {
        let seed = opts.seed.wrapping_add(i as u64);
        let u = || -> Result<&ControlVector> {
            match control.as_ref().expect("computed when needed") {
                Ok(u) => Ok(u),
                Err(e) => Err(e.clone()),
            }
        };
        let dp = || dp.clone();
        let result = match kind {
            CheckKind::Cg => check_cg(&ctx, &xi, tol.cg, opts.max_iter),
            CheckKind::Stationarity => u().and_then(|u| check_stationarity(&ctx, &xi, u, tol.stationarity)),
            CheckKind::ValueRepresentation => u().and_then(|u| {
                let dp = dp()?;
                let mut report = check_value_representation(&ctx, &xi, u, dp.p.root(), tol.value_representation)?;
                if let Ok(sre) = solve_sre_tree(&model) {
                    let cost = report.residual("cost").unwrap_or(f64::NAN);
                    report
                        .residuals
                        .push(Residual::info("cost_vs_sre_kernel", (cost - sre.value(&xi)).abs()));
                }
                Ok(report)
            }),
            CheckKind::ClosedLoop => u().and_then(|u| {
                let dp = dp()?;
                check_closed_loop_agreement(&ctx, &xi, u, &dp.gain, Some(tol.closed_loop_path), tol.closed_loop_cost)
            }),
            CheckKind::ClosedLoopSre => u().and_then(|u| {
                let sre = solve_sre_tree(&model)?;
                let mut report =
                    check_closed_loop_agreement(&ctx, &xi, u, &sre.gain, None, tol.closed_loop_cost_sre)?;
                report.name = "closed_loop_sre".into();
                Ok(report)
            }),
            CheckKind::YxIdentity => dp().and_then(|dp| check_yx_identity(&ctx, &dp.p, tol, opts.max_iter)),
            CheckKind::OptimalityPrinciple => u().and_then(|u| {
                check_optimality_principle(&ctx, &xi, u, opts.mid_level, tol.optimality_principle)
            }),
            CheckKind::CostPerturbation => u().and_then(|u| {
                check_cost_perturbation(&ctx, &xi, &Candidate::OpenLoop(u.clone()), opts.perturbations, seed, tol)
            }),
            CheckKind::SelfAdjointness => check_self_adjointness(&ctx, opts.pairs, seed, tol),
            CheckKind::QuadraticForm => check_quadratic_form(&ctx, opts.pairs, seed, tol.quadratic_form),
            CheckKind::Convexity => check_convexity(&ctx, opts.probe_samples, seed),
            CheckKind::LBoundedness => check_l_boundedness(problem, &opts.bound_depths, tol.l_bound_spread),
            CheckKind::UncontrolledCost => check_uncontrolled_cost(&ctx, &xi, KernelScheme::Exact, 1e-9),
            CheckKind::FeedbackValue => Err(SlqError::Config("feedback_value runs on ensembles".into())),
        };
        let report = result.unwrap_or_else(|e| CheckReport::from_error(kind.name(), carrier.clone(), &e));
        reports.push(report.expecting_failure(opts.expected_failures.contains(&kind)));
    }
    Ok(SuiteReport { reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSuiteOptions {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub xi: Vec<f64>,
    pub perturbations: usize,
    pub basis_degree: u32,
    /// Tree depth of the reference value when the coefficients are random.
    pub reference_depth: usize,
    pub checks: Vec<CheckKind>,
    pub expected_failures: Vec<CheckKind>,
    pub tolerances: Tolerances,
}

impl Default for EnsembleSuiteOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            paths: 100_000,
            seed: 0,
            xi: vec![1.0],
            perturbations: 34,
            basis_degree: 3,
            reference_depth: 16,
            checks: CheckKind::ENSEMBLE.to_vec(),
            expected_failures: Vec::new(),
            tolerances: Tolerances::default(),
        }
    }
}

/// Monte Carlo checks: uncontrolled cost against the regression kernel,
/// feedback cost against a reference value, and common-random-number
/// perturbations of the feedback policy.
///
/// With deterministic coefficients the feedback is the exact discrete
/// optimum and the reference is the Riccati ODE value; otherwise both come
/// from the tree (gain looked up at the nearest node of the reference tree).
pub fn run_ensemble_suite(problem: &LQProblem, opts: &EnsembleSuiteOptions) -> Result<SuiteReport> {
    let ens = generate_ensemble(opts.steps, opts.paths, problem.horizon, opts.seed)?;
    let basis = RegressionBasis::brownian(opts.basis_degree);
    let ctx = OperatorContext::ensemble(problem.clone(), ens, Projection::Regression(basis));
    let carrier = ctx.describe();
    let xi = state_vector(&opts.xi, problem.n())?;
    let tol = &opts.tolerances;
    let mut checks = opts.checks.clone();
    checks.sort();
    checks.dedup();

    let feedback = || -> Result<(GainSchedule, f64)> {
        if problem.is_deterministic() {
            let gain = solve_riccati_difference(problem, opts.steps)?.gain_schedule();
            let reference = solve_riccati_ode(problem, 10_000)?.value(&xi);
            Ok((gain, reference))
        } else {
            let model = TreeModel::build(opts.reference_depth, problem)?;
            let dp = dp_solve(&model)?;
            let reference = dp.value(&xi);
            let depth = model.depth();
            let tree = model.tree().clone();
            let gains = dp.gain;
            // Markov data: the gain depends on the node only through (level, W),
            // i.e. the number of down moves, so take the node whose low bits are set.
            let gain = GainSchedule::from_fn(move |_, t, w| {
                let k = (((t / tree.time(depth)) * depth as f64).round() as usize).min(depth - 1);
                let downs = ((k as f64 * tree.sqrt_dt() - (w - tree.w(0, 0))) / (2.0 * tree.sqrt_dt()))
                    .round()
                    .clamp(0.0, k as f64) as u32;
                gains.get(k, (1usize << downs) - 1).clone()
            });
            Ok((gain, reference))
        }
    };

    let mut reports = Vec::with_capacity(checks.len());
    for (i, &kind) in checks.iter().enumerate() {
        let seed = opts.seed.wrapping_add(1000 + i as u64);
        let result = match kind {
            CheckKind::UncontrolledCost => check_uncontrolled_cost(&ctx, &xi, KernelScheme::Explicit, tol.monte_carlo),
            CheckKind::FeedbackValue => feedback()
                .and_then(|(gain, reference)| check_feedback_value(&ctx, &xi, &gain, reference, tol.monte_carlo)),
            CheckKind::CostPerturbation => feedback().and_then(|(gain, _)| {
                check_cost_perturbation(&ctx, &xi, &Candidate::Feedback(gain), opts.perturbations, seed, tol)
            }),
            CheckKind::Stationarity => {
                check_stationarity(&ctx, &xi, &ControlVector::zeros(ctx.layout()), f64::INFINITY)
            }
            CheckKind::Convexity => check_convexity(&ctx, 20, seed),
            CheckKind::SelfAdjointness => check_self_adjointness(&ctx, 5, seed, tol),
            other => Err(SlqError::Config(format!("{other} needs the tree carrier"))),
        };
        let report = result.unwrap_or_else(|e| CheckReport::from_error(kind.name(), carrier.clone(), &e));
        reports.push(report.expecting_failure(opts.expected_failures.contains(&kind)));
    }
    Ok(SuiteReport { reports })
}

/// Layout helper for callers assembling controls by hand.
pub fn tree_layout(model: &TreeModel) -> ControlLayout {
    OperatorContext::tree(model.clone()).layout()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::MatrixFn;

    fn ctx(depth: usize, p: &LQProblem) -> OperatorContext {
        OperatorContext::tree(TreeModel::build(depth, p).unwrap())
    }

    fn one() -> Vector {
        Vector::from_element(1, 1.0)
    }

    fn optimum(ctx: &OperatorContext, xi: &Vector) -> ControlVector {
        solve_open_loop_cg(ctx, xi, 1e-12, 5000).unwrap().control
    }

    #[test]
    fn stationarity_examples() {
        let c = ctx(10, &fixtures::indefinite_weight());
        let u = optimum(&c, &one());
        let report = check_stationarity(&c, &one(), &u, 1e-8).unwrap();
        assert!(report.passed(), "{report}");

        let mut shifted = u.clone();
        for chunk in shifted.values.chunks_mut(2) {
            chunk[0] += 0.1;
        }
        let report = check_stationarity(&c, &one(), &shifted, 1e-8).unwrap();
        assert!(report.residual("sup_stationarity").unwrap() >= 0.4, "{report}");

        let z = ctx(6, &fixtures::zero(1, 1, 1.0));
        let mut any = ControlVector::zeros(z.layout());
        any.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let report = check_stationarity(&z, &one(), &any, 0.0).unwrap();
        assert_eq!(report.residual("sup_stationarity"), Some(0.0));
    }

    #[test]
    fn value_representation_examples() {
        let p = fixtures::indefinite_weight();
        let model = TreeModel::build(12, &p).unwrap();
        let c = OperatorContext::tree(model.clone());
        let u = optimum(&c, &one());
        let dp = dp_solve(&model).unwrap();
        let report = check_value_representation(&c, &one(), &u, dp.p.root(), 0.05).unwrap();
        assert!(report.passed(), "{report}");
        // Against the analytic kernel too.
        let analytic = Mat::from_element(1, 1, 20.0 / 9.0);
        let report = check_value_representation(&c, &one(), &u, &analytic, 0.05).unwrap();
        assert!(report.passed(), "{report}");

        let zero = Vector::zeros(1);
        let report =
            check_value_representation(&c, &zero, &ControlVector::zeros(c.layout()), dp.p.root(), 0.0).unwrap();
        for name in ["cost", "kernel_value", "adjoint_value"] {
            assert_eq!(report.residual(name), Some(0.0));
        }

        let two = Vector::from_element(1, 2.0);
        let u2 = optimum(&c, &two);
        let r1 = check_value_representation(&c, &one(), &u, &analytic, 0.05).unwrap();
        let r2 = check_value_representation(&c, &two, &u2, &analytic, 0.05).unwrap();
        for name in ["cost_vs_kernel", "cost_vs_adjoint", "cost"] {
            let (a, b) = (r1.residual(name).unwrap(), r2.residual(name).unwrap());
            assert!((b - 4.0 * a).abs() <= 1e-10 * b.abs().max(1.0), "{name}: {a} {b}");
        }
    }

    #[test]
    fn closed_loop_examples() {
        let p = fixtures::indefinite_weight();
        let model = TreeModel::build(12, &p).unwrap();
        let c = OperatorContext::tree(model.clone());
        let u = optimum(&c, &one());
        let dp = dp_solve(&model).unwrap();
        let report = check_closed_loop_agreement(&c, &one(), &u, &dp.gain, Some(1e-8), 1e-6).unwrap();
        assert!(report.passed(), "{report}");
        let sre = solve_sre_tree(&model).unwrap();
        let report = check_closed_loop_agreement(&c, &one(), &u, &sre.gain, None, 0.05).unwrap();
        assert!(report.passed(), "{report}");

        let mut p = fixtures::zero(1, 1, 1.0);
        p.weights.r = MatrixFn::constant(Mat::identity(1, 1));
        p.weights.g = MatrixFn::constant(Mat::identity(1, 1));
        let model = TreeModel::build(8, &p).unwrap();
        let c = OperatorContext::tree(model.clone());
        let u = optimum(&c, &one());
        assert_eq!(u.max_abs(), 0.0);
        let dp = dp_solve(&model).unwrap();
        let report = check_closed_loop_agreement(&c, &one(), &u, &dp.gain, Some(0.0), 0.0).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn yx_identity_examples() {
        let p = fixtures::indefinite_weight();
        let model = TreeModel::build(10, &p).unwrap();
        let c = OperatorContext::tree(model.clone());
        let dp = dp_solve(&model).unwrap();
        let report = check_yx_identity(&c, &dp.p, &Tolerances::default(), 5000).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.residual("min_abs_det").unwrap() > 0.0);
        // At the root X = I, so Y(0) is the kernel itself.
        assert!(report.residual("max_kernel_gap").unwrap() <= 1e-8);

        // Uncontrolled with a random terminal weight: X = I and Y = E[G | node].
        let mut p = fixtures::zero(1, 1, 1.0);
        p.weights.r = MatrixFn::constant(Mat::identity(1, 1));
        p.weights.g = MatrixFn::markov(|_, w| Mat::from_element(1, 1, 2.0 + w.sin()));
        let model = TreeModel::build(6, &p).unwrap();
        let c = OperatorContext::tree(model.clone());
        let dp = dp_solve(&model).unwrap();
        let report = check_yx_identity(&c, &dp.p, &Tolerances::default(), 100).unwrap();
        assert!(report.residual("max_kernel_gap").unwrap() <= 1e-12, "{report}");
        assert_eq!(report.residual("max_condition"), Some(1.0));
    }

    #[test]
    fn optimality_principle_examples() {
        let p = fixtures::indefinite_weight();
        let c = ctx(10, &p);
        let u = optimum(&c, &one());
        let report = check_optimality_principle(&c, &one(), &u, 5, 1e-9).unwrap();
        assert!(report.passed(), "{report}");

        let z = ctx(6, &fixtures::zero(1, 1, 1.0));
        let report = check_optimality_principle(&z, &one(), &ControlVector::zeros(z.layout()), 3, 0.0).unwrap();
        assert_eq!(report.residual("max_subtree_gap"), Some(0.0));

        let report = check_optimality_principle(&c, &one(), &ControlVector::zeros(c.layout()), 5, 1e-9).unwrap();
        assert!(!report.passed());
        assert!(report.residual("mean_subtree_gap").unwrap() > 0.0);
    }

    #[test]
    fn suboptimal_gap_matches_kernel_difference() {
        // Under u = 0 the cost-to-go at a node is X'MX and the subtree optimum X'PX.
        let p = fixtures::indefinite_weight();
        let model = TreeModel::build(10, &p).unwrap();
        let c = OperatorContext::tree(model.clone());
        let report = check_optimality_principle(&c, &one(), &ControlVector::zeros(c.layout()), 5, 1e-9).unwrap();
        let m = solve_cost_kernel_tree(&model, KernelScheme::Exact);
        let dp = dp_solve(&model).unwrap();
        let expected = (0..32)
            .map(|j| m.kernel.get(5, j)[(0, 0)] - dp.p.get(5, j)[(0, 0)])
            .sum::<f64>()
            / 32.0;
        assert!((report.residual("mean_subtree_gap").unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn perturbation_examples() {
        let c = ctx(10, &fixtures::indefinite_weight());
        let u = optimum(&c, &one());
        let report = check_cost_perturbation(&c, &one(), &Candidate::OpenLoop(u.clone()), 10, 1, &Tolerances::default())
            .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.residual("min_gap").unwrap() >= -1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_unit_control(&c, false, &mut rng);
        let base = c.cost(&one(), &u).unwrap().mean;
        assert_eq!(c.cost(&one(), &u.combine(1.0, &v, 0.0).unwrap()).unwrap().mean - base, 0.0);

        let zero = ControlVector::zeros(c.layout());
        let report =
            check_cost_perturbation(&c, &one(), &Candidate::OpenLoop(zero), 10, 1, &Tolerances::default()).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn monte_carlo_perturbation_of_the_discrete_optimum() {
        let p = fixtures::indefinite_weight();
        let ens = generate_ensemble(20, 20_000, 1.0, 5).unwrap();
        let c = OperatorContext::ensemble(p.clone(), ens, Projection::Regression(RegressionBasis::brownian(3)));
        let gain = solve_riccati_difference(&p, 20).unwrap().gain_schedule();
        let report =
            check_cost_perturbation(&c, &one(), &Candidate::Feedback(gain), 5, 2, &Tolerances::default()).unwrap();
        assert!(report.passed(), "{report}");
        // A zero feedback is visibly suboptimal.
        let zero = GainSchedule::from_fn(|_, _, _| Mat::zeros(2, 1));
        let report =
            check_cost_perturbation(&c, &one(), &Candidate::Feedback(zero), 5, 2, &Tolerances::default()).unwrap();
        assert!(!report.passed(), "{report}");
    }

    #[test]
    fn operator_identity_checks() {
        let c = ctx(8, &fixtures::markov_random());
        let tol = Tolerances::default();
        assert!(check_self_adjointness(&c, 10, 1, &tol).unwrap().passed());
        assert!(check_quadratic_form(&c, 10, 2, tol.quadratic_form).unwrap().passed());
        let report = check_l_boundedness(&fixtures::markov_random(), &[4, 6, 8], 2.0).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn convexity_and_cg_reports() {
        let c = ctx(8, &fixtures::negated_weights());
        let report = check_convexity(&c, 20, 1).unwrap();
        assert!(!report.passed());
        assert!(report.residual("delta_hat").unwrap() < 0.0);
        assert!(matches!(
            check_cg(&c, &one(), 1e-12, 100),
            Err(SlqError::NotUniformlyConvex { .. })
        ));
        let c = ctx(8, &fixtures::indefinite_weight());
        assert!(check_cg(&c, &one(), 1e-12, 1000).unwrap().passed());
    }

    #[test]
    fn report_outcomes_and_csv() {
        let pass = CheckReport::new("a", "tree".into(), vec![Residual::bounded("r", 1.0, 2.0)]);
        let fail = CheckReport::new("b", "tree".into(), vec![Residual::bounded("r", f64::NAN, 2.0)]);
        assert_eq!(pass.outcome(), Outcome::Pass);
        assert_eq!(fail.outcome(), Outcome::Fail);
        assert_eq!(fail.clone().expecting_failure(true).outcome(), Outcome::ExpectedFailure);
        assert_eq!(pass.clone().expecting_failure(true).outcome(), Outcome::UnexpectedPass);
        let err = CheckReport::from_error("c", "tree".into(), &SlqError::Config("x".into()));
        assert!(!err.passed());

        let suite = SuiteReport {
            reports: vec![pass, fail, err],
        };
        assert!(!suite.acceptable());
        let mut buf = Vec::new();
        suite.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        assert!(suite.summary().contains("3 checks: 1 pass, 2 fail"));
    }

    #[test]
    fn check_names_round_trip() {
        for k in CheckKind::TREE.iter().chain(CheckKind::ENSEMBLE.iter()) {
            assert_eq!(k.name().parse::<CheckKind>().unwrap(), *k);
        }
        assert!("nope".parse::<CheckKind>().is_err());
    }

    #[test]
    fn tree_suite_on_the_worked_example() {
        let opts = TreeSuiteOptions {
            depth: 8,
            mid_level: 4,
            pairs: 5,
            perturbations: 4,
            probe_samples: 50,
            bound_depths: vec![4, 6, 8],
            ..TreeSuiteOptions::default()
        };
        let report = run_tree_suite(&fixtures::indefinite_weight(), &opts).unwrap();
        assert!(report.acceptable(), "{}", report.summary());
        assert_eq!(report.reports.len(), CheckKind::TREE.len());
    }

    #[test]
    fn tree_suite_fixtures_fail_as_declared() {
        let negated = TreeSuiteOptions {
            depth: 8,
            probe_samples: 20,
            checks: vec![CheckKind::Convexity, CheckKind::Cg],
            expected_failures: vec![CheckKind::Convexity, CheckKind::Cg],
            ..TreeSuiteOptions::default()
        };
        let report = run_tree_suite(&fixtures::negated_weights(), &negated).unwrap();
        assert!(report.acceptable(), "{}", report.summary());
        assert!(report.reports.iter().all(|r| r.outcome() == Outcome::ExpectedFailure));

        let zero = TreeSuiteOptions {
            depth: 8,
            mid_level: 4,
            control: SuiteControl::Zero,
            checks: vec![CheckKind::Stationarity, CheckKind::OptimalityPrinciple],
            expected_failures: vec![CheckKind::Stationarity, CheckKind::OptimalityPrinciple],
            ..TreeSuiteOptions::default()
        };
        let report = run_tree_suite(&fixtures::indefinite_weight(), &zero).unwrap();
        assert!(report.acceptable(), "{}", report.summary());
        let undeclared = TreeSuiteOptions {
            expected_failures: Vec::new(),
            ..zero
        };
        assert!(!run_tree_suite(&fixtures::indefinite_weight(), &undeclared).unwrap().acceptable());
    }

    #[test]
    fn ensemble_suite_small() {
        let opts = EnsembleSuiteOptions {
            steps: 20,
            paths: 20_000,
            perturbations: 3,
            reference_depth: 12,
            ..EnsembleSuiteOptions::default()
        };
        let report = run_ensemble_suite(&fixtures::indefinite_weight(), &opts).unwrap();
        assert_eq!(report.reports.len(), 3);
        // A 20-step grid is far from the continuous value; only the perturbation
        // and the cost identity are expected to hold here.
        assert!(report.get("cost_perturbation").unwrap().passed(), "{}", report.summary());
        assert!(report.get("uncontrolled_cost").unwrap().passed(), "{}", report.summary());
    }

    #[test]
    fn ensemble_suite_with_random_coefficients_uses_the_tree_gain() {
        let opts = EnsembleSuiteOptions {
            steps: 16,
            paths: 20_000,
            perturbations: 3,
            reference_depth: 16,
            checks: vec![CheckKind::FeedbackValue, CheckKind::CostPerturbation],
            ..EnsembleSuiteOptions::default()
        };
        let report = run_ensemble_suite(&fixtures::markov_random(), &opts).unwrap();
        assert!(report.acceptable(), "{}", report.summary());
    }
}
