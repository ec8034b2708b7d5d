//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails.

use std::time::{Duration, Instant};

use slq_core::fixtures::{indefinite_weight, indefinite_weight_kernel, negated_weights, standard_condition, tanh_terminal};
use slq_core::verify::{
    check_closed_loop_agreement, check_cost_perturbation, check_feedback_value,
    check_optimality_principle, check_quadratic_form, check_self_adjointness, check_stationarity,
    check_uncontrolled_cost, check_yx_identity, run_tree_suite, Candidate, SuiteControl, TreeSuiteOptions,
};
use slq_core::{
    dp_solve, generate_ensemble, solve_open_loop_cg, solve_riccati_difference, solve_riccati_ode, solve_sre_lsmc,
    CheckKind, CheckReport, ControlVector, KernelScheme, OperatorContext, Outcome, Projection, RegressionBasis,
    Result, Tolerances, TreeModel, Vector,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn xi() -> Vector {
    Vector::from_vec(vec![1.0])
}

fn analytic_value() -> f64 {
    20.0 / 9.0
}

fn report_line(r: &CheckReport) -> String {
    let residuals: Vec<String> = r
        .residuals
        .iter()
        .filter(|x| x.tolerance.is_some())
        .map(|x| format!("{}={:.3e}<={:.1e}", x.name, x.value, x.tolerance.unwrap()))
        .collect();
    match &r.error {
        Some(e) => format!("{} error: {e}", r.name),
        None => format!("{} {}", r.name, residuals.join(" ")),
    }
}

fn riccati_ode() -> Result<Verdict> {
    let sol = solve_riccati_ode(&indefinite_weight(), 10_000)?;
    let err = sol
        .times
        .iter()
        .zip(&sol.p)
        .map(|(&t, p)| (p[(0, 0)] - indefinite_weight_kernel(t)).abs())
        .fold(0.0, f64::max);
    Ok(Verdict::new(err <= 1e-8, format!("max |P - 20/(9-4t)| = {err:.3e} <= 1e-8")))
}

fn positivity() -> Result<Verdict> {
    let sol = solve_riccati_ode(&indefinite_weight(), 10_000)?;
    let mut err = 0.0f64;
    let mut lowest = f64::INFINITY;
    for (&t, &lam) in sol.times.iter().zip(&sol.lambda_min) {
        let exact = f64::min(5.0, (11.0 + 4.0 * t) / (9.0 - 4.0 * t));
        err = err.max((lam - exact).abs());
        lowest = lowest.min(lam);
    }
    Ok(Verdict::new(
        err <= 1e-8 && lowest > 0.0 && sol.certificate.certified,
        format!("max |lambda_min - exact| = {err:.3e} <= 1e-8, min lambda = {lowest:.6}"),
    ))
}

fn oracle_equivalence() -> Result<Verdict> {
    let model = TreeModel::build(12, &indefinite_weight())?;
    let ctx = OperatorContext::tree(model.clone());
    let dp = dp_solve(&model)?;
    let sol = solve_open_loop_cg(&ctx, &xi(), 1e-12, 5000)?;
    let value_gap = (ctx.cost(&xi(), &sol.control)?.mean - dp.value(&xi())).abs();
    let closed = check_closed_loop_agreement(&ctx, &xi(), &sol.control, &dp.gain, Some(1e-8), 1e-9)?;
    Ok(Verdict::new(
        value_gap <= 1e-9 && closed.passed(),
        format!("|cg - dp| = {value_gap:.3e} <= 1e-9, {}", report_line(&closed)),
    ))
}

fn gap_law() -> Result<Verdict> {
    let ctx = OperatorContext::tree(TreeModel::build(10, &indefinite_weight())?);
    let u = solve_open_loop_cg(&ctx, &xi(), 1e-12, 5000)?.control;
    let tol = Tolerances {
        gap_law: 1e-8,
        ..Tolerances::default()
    };
    // 34 directions times 3 step sizes.
    let r = check_cost_perturbation(&ctx, &xi(), &Candidate::OpenLoop(u), 34, 4, &tol)?;
    let trials = r.residual("trials").unwrap_or(0.0);
    Ok(Verdict::new(
        r.passed() && trials >= 100.0,
        format!("{} over {trials} trials", report_line(&r)),
    ))
}

fn operator_identities() -> Result<Verdict> {
    let ctx = OperatorContext::tree(TreeModel::build(10, &indefinite_weight())?);
    let tol = Tolerances {
        self_adjoint: 1e-10,
        ..Tolerances::default()
    };
    let adj = check_self_adjointness(&ctx, 50, 5, &tol)?;
    let quad = check_quadratic_form(&ctx, 50, 6, 1e-9)?;
    Ok(Verdict::new(
        adj.passed() && quad.passed(),
        format!("{}; {}", report_line(&adj), report_line(&quad)),
    ))
}

fn stationarity() -> Result<Verdict> {
    let ctx = OperatorContext::tree(TreeModel::build(10, &indefinite_weight())?);
    let u = solve_open_loop_cg(&ctx, &xi(), 1e-12, 5000)?.control;
    let optimum = check_stationarity(&ctx, &xi(), &u, 1e-8)?;
    let zero = check_stationarity(&ctx, &xi(), &ControlVector::zeros(ctx.layout()), 1e-8)?;
    let power = zero.residual("sup_stationarity").unwrap_or(0.0);
    Ok(Verdict::new(
        optimum.passed() && power >= 0.4,
        format!("{}, zero control residual = {power:.4} >= 0.4", report_line(&optimum)),
    ))
}

fn optimality_principle() -> Result<Verdict> {
    let ctx = OperatorContext::tree(TreeModel::build(10, &indefinite_weight())?);
    let u = solve_open_loop_cg(&ctx, &xi(), 1e-12, 5000)?.control;
    let r = check_optimality_principle(&ctx, &xi(), &u, 5, 1e-9)?;
    Ok(Verdict::new(r.passed(), report_line(&r)))
}

fn yx_identity() -> Result<Verdict> {
    let model = TreeModel::build(10, &indefinite_weight())?;
    let ctx = OperatorContext::tree(model.clone());
    let dp = dp_solve(&model)?;
    let tol = Tolerances {
        yx_identity: 0.05,
        ..Tolerances::default()
    };
    let r = check_yx_identity(&ctx, &dp.p, &tol, 5000)?;
    let det = r.residual("min_abs_det").unwrap_or(0.0);
    Ok(Verdict::new(
        r.passed() && det > 0.0,
        format!("{}, min |det X| = {det:.4e}", report_line(&r)),
    ))
}

fn monte_carlo_value() -> Result<Verdict> {
    let problem = indefinite_weight();
    let gain = solve_riccati_difference(&problem, 200)?.gain_schedule();
    let ens = generate_ensemble(200, 100_000, problem.horizon, 7)?;
    let ctx = OperatorContext::ensemble(problem, ens, Projection::Regression(RegressionBasis::brownian(3)));
    let r = check_feedback_value(&ctx, &xi(), &gain, analytic_value(), 0.02)?;
    Ok(Verdict::new(
        r.passed(),
        format!(
            "{} (cost {:.5} +- {:.5})",
            report_line(&r),
            r.residual("cost").unwrap_or(f64::NAN),
            r.residual("cost_stderr").unwrap_or(f64::NAN)
        ),
    ))
}

fn lsmc_vs_tree() -> Result<Verdict> {
    let problem = tanh_terminal();
    let tree = dp_solve(&TreeModel::build(16, &problem)?)?.value(&xi());
    let ens = generate_ensemble(50, 100_000, problem.horizon, 11)?;
    let sol = solve_sre_lsmc(&problem, &ens, Projection::Regression(RegressionBasis::brownian(3)))?;
    let lsmc = sol.value(&xi());
    let stderr = sol.p0_stderr[(0, 0)];
    let gap = (lsmc - tree).abs();
    let allowed = 3.0 * stderr + 0.02;
    Ok(Verdict::new(
        gap <= allowed,
        format!("lsmc {lsmc:.5} +- {stderr:.5}, tree {tree:.5}, gap {gap:.3e} <= {allowed:.3e}"),
    ))
}

fn uncontrolled_cost() -> Result<Verdict> {
    let problem = standard_condition();
    let ens = generate_ensemble(200, 100_000, problem.horizon, 13)?;
    let ctx = OperatorContext::ensemble(problem, ens, Projection::Regression(RegressionBasis::brownian(3)));
    let r = check_uncontrolled_cost(&ctx, &xi(), KernelScheme::Explicit, 0.02)?;
    Ok(Verdict::new(
        r.passed(),
        format!(
            "{} (cost {:.5}, kernel {:.5})",
            report_line(&r),
            r.residual("cost").unwrap_or(f64::NAN),
            r.residual("kernel_value").unwrap_or(f64::NAN)
        ),
    ))
}

fn negative_controls() -> Result<Verdict> {
    let negated = run_tree_suite(
        &negated_weights(),
        &TreeSuiteOptions {
            depth: 8,
            probe_samples: 200,
            checks: vec![CheckKind::Cg, CheckKind::Convexity],
            expected_failures: vec![CheckKind::Cg, CheckKind::Convexity],
            ..TreeSuiteOptions::default()
        },
    )?;
    let zero = run_tree_suite(
        &indefinite_weight(),
        &TreeSuiteOptions {
            depth: 8,
            control: SuiteControl::Zero,
            checks: vec![CheckKind::Stationarity],
            expected_failures: vec![CheckKind::Stationarity],
            ..TreeSuiteOptions::default()
        },
    )?;
    let reports: Vec<&CheckReport> = negated.reports.iter().chain(&zero.reports).collect();
    let all_expected = reports.iter().all(|r| r.outcome() == Outcome::ExpectedFailure);
    let cg_error = negated
        .get("cg")
        .and_then(|r| r.error.clone())
        .unwrap_or_default();
    let delta = negated.get("convexity").and_then(|r| r.residual("delta_hat")).unwrap_or(f64::NAN);
    Ok(Verdict::new(
        all_expected && cg_error.contains("not uniformly convex") && delta < 0.0,
        format!(
            "cg: {cg_error}; delta_hat = {delta:.4e}; zero-control stationarity = {:.4}",
            zero.reports[0].residual("sup_stationarity").unwrap_or(f64::NAN)
        ),
    ))
}

type Criterion = (&'static str, Duration, fn() -> Result<Verdict>);

fn main() {
    let secs = Duration::from_secs;
    let criteria: [Criterion; 12] = [
        ("analytic riccati reproduction", secs(1), riccati_ode),
        ("positivity certificate", secs(1), positivity),
        ("cg and dp agree on the tree", secs(30), oracle_equivalence),
        ("quadratic gap law", secs(60), gap_law),
        ("operator identities", secs(60), operator_identities),
        ("stationarity", secs(10), stationarity),
        ("optimality principle", secs(30), optimality_principle),
        ("kernel equals Y X^-1", secs(60), yx_identity),
        ("monte carlo feedback value", secs(60), monte_carlo_value),
        ("lsmc against tree", secs(300), lsmc_vs_tree),
        ("uncontrolled cost identity", secs(60), uncontrolled_cost),
        ("negative controls", secs(60), negative_controls),
    ];
    // Keep the harness's own filter argument from selecting nothing.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if let Some(f) = &filter {
            if !name.contains(f.as_str()) {
                continue;
            }
        }
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = verdict.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.2}s / {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            verdict.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {failures} failed");
    if failures > 0 {
        std::process::exit(1);
    }
}

