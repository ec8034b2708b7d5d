//! Riccati routes to the feedback gain: a backward matrix ODE for
//! deterministic data, an exact discrete recursion for the Gaussian Euler
//! scheme, the stochastic Riccati equation on a tree, and its regression
//! counterpart on path ensembles.

use std::io::Write;

use crate::bsde::{project_step, LinearFit, Projection, RegressionBasis, RegressionDiagnostics};
use crate::error::{Result, SlqError};
use crate::lattice::{map_level, NodeValue, TreeModel, TreeProcess};
use crate::linalg::{solve_psd, SolveFailure};
use crate::model::{symmetrize, CoefficientBundle, LQProblem, Mat, Vector};
use crate::sde::{pairwise_sum, GainSchedule, PathEnsemble, StepCoefficients};

/// Feedback gain `-(R + D'PD)^{-1} (B'P + D'PC + D'L + S)` and the smallest
/// eigenvalue of `R + D'PD`.
///
/// A singular `R + D'PD` is an error, except when both it and the linear
/// term vanish identically; the gain is zero then.
pub fn feedback_gain(p: &Mat, lambda: &Mat, b: &CoefficientBundle) -> Result<(Mat, f64)> {
    let (hessian, linear) = gain_terms(p, lambda, b);
    if hessian.amax() == 0.0 && linear.amax() == 0.0 {
        return Ok((Mat::zeros(linear.nrows(), linear.ncols()), 0.0));
    }
    match solve_psd(&hessian, &linear, false) {
        Ok(s) if s.null_dims > 0 => Err(SlqError::SingularGain { condition: f64::INFINITY }),
        Ok(s) => Ok((-s.solution, s.min_eig)),
        Err(SolveFailure::Singular { condition, .. }) => Err(SlqError::SingularGain { condition }),
        Err(SolveFailure::Indefinite { .. }) => unreachable!("definiteness not requested"),
    }
}

fn gain_terms(p: &Mat, lambda: &Mat, b: &CoefficientBundle) -> (Mat, Mat) {
    let dt_p = b.d.transpose() * p;
    let hessian = symmetrize(&(&b.r + &dt_p * &b.d));
    let linear = b.b.transpose() * p + &dt_p * &b.c + b.d.transpose() * lambda + &b.s;
    (hessian, linear)
}

/// Drift of the Riccati equation, `dP = -F dt + L dW`, with the gain
/// already computed.
fn riccati_driver(p: &Mat, lambda: &Mat, b: &CoefficientBundle, gain: &Mat) -> Mat {
    let (_, linear) = gain_terms(p, lambda, b);
    let mut f = p * &b.a;
    f += b.a.transpose() * p;
    f += b.c.transpose() * p * &b.c;
    f += lambda * &b.c;
    f += b.c.transpose() * lambda;
    f += &b.q;
    f += linear.transpose() * gain;
    symmetrize(&f)
}

fn blowup(t: f64, node: Option<(usize, usize)>, err: SlqError) -> SlqError {
    match err {
        SlqError::SingularGain { condition } => SlqError::RiccatiBlowup { t, node, condition },
        other => other,
    }
}

/// Whether the positivity of `R + D'PD` held at every sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Certificate {
    pub lambda_min: f64,
    pub certified: bool,
}

impl Certificate {
    fn new(lambda_min: f64) -> Self {
        Self {
            lambda_min,
            certified: lambda_min > 0.0,
        }
    }
}

/// `P`, the gain and `lambda_min(R + D'PD)` on a uniform time grid.
#[derive(Clone, Debug)]
pub struct GridRiccati {
    pub times: Vec<f64>,
    /// `P(t_k)` for `k = 0..=N`.
    pub p: Vec<Mat>,
    /// Gain at `t_k` for `k = 0..N`.
    pub gain: Vec<Mat>,
    /// `lambda_min(R + D'P D)` at `t_k` for `k = 0..=N`.
    pub lambda_min: Vec<f64>,
    pub certificate: Certificate,
}

impl GridRiccati {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn value(&self, xi: &Vector) -> f64 {
        xi.dot(&(&self.p[0] * xi))
    }

    /// Gain looked up at the nearest grid time.
    pub fn gain_schedule(&self) -> GainSchedule {
        let gains = self.gain.clone();
        let horizon = *self.times.last().unwrap();
        let steps = self.steps();
        GainSchedule::from_fn(move |_, t, _| {
            let idx = ((t / horizon) * steps as f64).round() as usize;
            gains[idx.min(steps - 1)].clone()
        })
    }

    /// `t,w,p..,theta..,lambda_min` rows with `w` empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.p[0].nrows();
        let m = self.gain.first().map_or(0, |g| g.nrows());
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(riccati_header(n, m))?;
        for (k, t) in self.times.iter().enumerate() {
            out.write_record(riccati_row(*t, None, &self.p[k], self.gain.get(k), Some(self.lambda_min[k]), m * n))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn riccati_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "w".to_string()];
    for i in 0..n {
        for j in 0..n {
            h.push(format!("p{i}{j}"));
        }
    }
    for i in 0..m {
        for j in 0..n {
            h.push(format!("theta{i}{j}"));
        }
    }
    h.push("lambda_min".into());
    h
}

fn riccati_row(t: f64, w: Option<f64>, p: &Mat, gain: Option<&Mat>, lambda_min: Option<f64>, gain_len: usize) -> Vec<String> {
    let fmt = |v: f64| format!("{v:.17e}");
    let mut row = vec![fmt(t), w.map(fmt).unwrap_or_default()];
    row.extend(p.flatten().into_iter().map(fmt));
    match gain {
        Some(g) => row.extend(g.flatten().into_iter().map(fmt)),
        None => row.extend((0..gain_len).map(|_| String::new())),
    }
    row.push(lambda_min.map(fmt).unwrap_or_default());
    row
}

fn require_deterministic(p: &LQProblem) -> Result<()> {
    if p.is_deterministic() {
        Ok(())
    } else {
        Err(SlqError::Config(format!(
            "problem '{}' has Brownian-dependent data; the grid routes need deterministic coefficients",
            p.name
        )))
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        Err(SlqError::Config("at least one time step is required".into()))
    } else {
        Ok(())
    }
}

/// Classical RK4 backward integration of the deterministic Riccati ODE.
pub fn solve_riccati_ode(p: &LQProblem, steps: usize) -> Result<GridRiccati> {
    require_deterministic(p)?;
    check_steps(steps)?;
    let n = p.n();
    let zero = Mat::zeros(n, n);
    let h = p.horizon / steps as f64;
    let rhs = |t: f64, pm: &Mat| -> Result<Mat> {
        let b = p.bundle_unchecked(t, 0.0);
        let (gain, _) = feedback_gain(pm, &zero, &b).map_err(|e| blowup(t, None, e))?;
        Ok(riccati_driver(pm, &zero, &b, &gain))
    };
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
    let mut ps = vec![Mat::zeros(n, n); steps + 1];
    ps[steps] = p.terminal(0.0);
    for k in (0..steps).rev() {
        let t = times[k + 1];
        let cur = &ps[k + 1];
        // dP/dt = -F, integrated from t to t - h.
        let k1 = rhs(t, cur)?;
        let k2 = rhs(t - h / 2.0, &(cur + &k1 * (h / 2.0)))?;
        let k3 = rhs(t - h / 2.0, &(cur + &k2 * (h / 2.0)))?;
        let k4 = rhs(t - h, &(cur + &k3 * h))?;
        let next = symmetrize(&(cur + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SlqError::RiccatiBlowup {
                t: times[k],
                node: None,
                condition: f64::INFINITY,
            });
        }
        ps[k] = next;
    }
    grid_solution(p, times, ps, |t, pm, b| {
        feedback_gain(pm, &zero, b).map_err(|e| blowup(t, None, e))
    })
}

fn grid_solution(
    p: &LQProblem,
    times: Vec<f64>,
    ps: Vec<Mat>,
    gain_at: impl Fn(f64, &Mat, &CoefficientBundle) -> Result<(Mat, f64)>,
) -> Result<GridRiccati> {
    let steps = times.len() - 1;
    let mut gain = Vec::with_capacity(steps);
    let mut lambda_min = Vec::with_capacity(steps + 1);
    for (k, &t) in times.iter().enumerate() {
        let b = p.bundle_unchecked(t, 0.0);
        let (g, eig) = gain_at(t, &ps[k], &b)?;
        if k < steps {
            gain.push(g);
        }
        lambda_min.push(eig);
    }
    let worst = lambda_min.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GridRiccati {
        times,
        p: ps,
        gain,
        lambda_min,
        certificate: Certificate::new(worst),
    })
}

/// Exact dynamic programming for the Euler scheme with Gaussian increments
/// and deterministic data. Only the first two moments of the increment enter
/// the one-step quadratic, so `xi' P_0 xi` is the optimal discrete cost and
/// the gain is the exact discrete optimal feedback.
pub fn solve_riccati_difference(p: &LQProblem, steps: usize) -> Result<GridRiccati> {
    require_deterministic(p)?;
    check_steps(steps)?;
    let n = p.n();
    let dt = p.horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut ps = vec![Mat::zeros(n, n); steps + 1];
    let mut gains = vec![Mat::zeros(p.m(), n); steps];
    ps[steps] = p.terminal(0.0);
    let eye = Mat::identity(n, n);
    for k in (0..steps).rev() {
        let b = p.bundle_unchecked(times[k], 0.0);
        let next = &ps[k + 1];
        let fx = &eye + &b.a * dt;
        let fu = &b.b * dt;
        let kxx = fx.transpose() * next * &fx + b.c.transpose() * next * &b.c * dt + &b.q * dt;
        let kux = fu.transpose() * next * &fx + b.d.transpose() * next * &b.c * dt + &b.s * dt;
        let kuu = fu.transpose() * next * &fu + b.d.transpose() * next * &b.d * dt + &b.r * dt;
        let solved = solve_psd(&kuu, &kux, true).map_err(|failure| {
            let condition = match failure {
                SolveFailure::Singular { condition, .. } => condition,
                SolveFailure::Indefinite { .. } => f64::INFINITY,
            };
            SlqError::RiccatiBlowup {
                t: times[k],
                node: None,
                condition,
            }
        })?;
        gains[k] = -solved.solution;
        ps[k] = symmetrize(&(kxx + kux.transpose() * &gains[k]));
    }
    let zero = Mat::zeros(n, n);
    let mut solution = grid_solution(p, times, ps, |t, pm, b| {
        feedback_gain(pm, &zero, b).map_err(|e| blowup(t, None, e))
    })?;
    solution.gain = gains;
    Ok(solution)
}

/// `(P, Lambda)`, the gain and `lambda_min` on every tree node.
#[derive(Clone, Debug)]
pub struct TreeRiccati {
    pub p: TreeProcess<Mat>,
    /// Martingale integrand on levels `0..N-1`.
    pub lambda: TreeProcess<Mat>,
    pub gain: TreeProcess<Mat>,
    pub lambda_min: TreeProcess<f64>,
    pub certificate: Certificate,
}

impl TreeRiccati {
    pub fn value(&self, xi: &Vector) -> f64 {
        xi.dot(&(self.p.root() * xi))
    }

    /// Rows per node; gain and `lambda_min` blank at the leaves.
    pub fn write_csv<W: Write>(&self, model: &TreeModel, writer: W) -> Result<()> {
        let tree = model.tree();
        let n = self.p.root().nrows();
        let m = self.gain.root().nrows();
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(riccati_header(n, m))?;
        for (k, j, pm) in self.p.iter() {
            let interior = k < tree.depth();
            out.write_record(riccati_row(
                tree.time(k),
                Some(tree.w(k, j)),
                pm,
                interior.then(|| self.gain.get(k, j)),
                interior.then(|| *self.lambda_min.get(k, j)),
                m * n,
            ))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One explicit step of the stochastic Riccati equation at every node.
pub fn solve_sre_tree(model: &TreeModel) -> Result<TreeRiccati> {
    let tree = model.tree();
    let depth = tree.depth();
    let dt = tree.dt();
    let scale = 0.5 / tree.sqrt_dt();
    let mut p_levels: Vec<Vec<Mat>> = vec![Vec::new(); depth + 1];
    let mut l_levels: Vec<Vec<Mat>> = vec![Vec::new(); depth];
    let mut g_levels: Vec<Vec<Mat>> = vec![Vec::new(); depth];
    let mut e_levels: Vec<Vec<f64>> = vec![Vec::new(); depth];
    p_levels[depth] = (0..1usize << depth).map(|j| model.terminal(j).clone()).collect();
    for k in (0..depth).rev() {
        let next = &p_levels[k + 1];
        let results: Vec<Result<(Mat, Mat, Mat, f64)>> = map_level(1 << k, |j| {
            let (up, down) = (&next[2 * j], &next[2 * j + 1]);
            let pbar = <Mat as NodeValue>::mean(up, down);
            let lambda = symmetrize(&<Mat as NodeValue>::diff_scaled(up, down, scale));
            let b = model.bundle(k, j);
            let (gain, eig) =
                feedback_gain(&pbar, &lambda, b).map_err(|e| blowup(tree.time(k), Some((k, j)), e))?;
            let f = riccati_driver(&pbar, &lambda, b, &gain);
            let pk = symmetrize(&(&pbar + f * dt));
            if pk.iter().any(|v| !v.is_finite()) {
                return Err(SlqError::RiccatiBlowup {
                    t: tree.time(k),
                    node: Some((k, j)),
                    condition: f64::INFINITY,
                });
            }
            Ok((pk, lambda, gain, eig))
        });
        for r in results {
            let (pk, l, g, e) = r?;
            p_levels[k].push(pk);
            l_levels[k].push(l);
            g_levels[k].push(g);
            e_levels[k].push(e);
        }
    }
    let worst = e_levels.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    Ok(TreeRiccati {
        p: TreeProcess::from_levels(p_levels),
        lambda: TreeProcess::from_levels(l_levels),
        gain: TreeProcess::from_levels(g_levels),
        lambda_min: TreeProcess::from_levels(e_levels),
        certificate: Certificate::new(worst),
    })
}

/// Stochastic Riccati equation on a path ensemble with `P` and `Lambda`
/// represented per step as regressions on `W(t_k)`.
#[derive(Clone, Debug)]
pub struct RegressionRiccati {
    pub problem: LQProblem,
    pub steps: usize,
    pub dt: f64,
    /// Fits of the conditional mean of `P_{k+1}` and of `Lambda_k` per step.
    pub fits: Vec<Option<(LinearFit, LinearFit)>>,
    pub basis: Option<RegressionBasis>,
    /// Path average of `P(t_k)`.
    pub mean_p: Vec<Mat>,
    /// `P(0)`; every path shares `W(0) = 0`.
    pub p0: Mat,
    /// Standard error of `P(0)`. Least squares with an intercept preserves
    /// path averages, so `P(0)` is the mean of `G(W(T))` plus the summed
    /// drift along each path; this is the spread of that quantity.
    pub p0_stderr: Mat,
    pub diagnostics: Vec<RegressionDiagnostics>,
    pub certificate: Certificate,
}

impl RegressionRiccati {
    pub fn value(&self, xi: &Vector) -> f64 {
        xi.dot(&(&self.p0 * xi))
    }

    /// `(P_bar, Lambda)` of step `k` evaluated at Brownian value `w`.
    pub fn state_at(&self, step: usize, w: f64) -> Option<(Mat, Mat)> {
        let basis = self.basis?;
        let (fit_p, fit_l) = self.fits[step].as_ref()?;
        let n = self.problem.n();
        let features = basis.design(&[w], None, n);
        let pbar = Mat::from_column_slice(n, n, &fit_p.predict(features.row(0)));
        let lambda = Mat::from_column_slice(n, n, &fit_l.predict(features.row(0)));
        Some((symmetrize(&pbar), symmetrize(&lambda)))
    }

    /// Gain evaluated from the fitted `(P_bar, Lambda)`. Fails with NaN
    /// entries where `R + D'PD` is singular, which simulation reports.
    pub fn gain_schedule(&self) -> Result<GainSchedule> {
        if self.basis.is_none() {
            return Err(SlqError::Config("gain schedule needs a regression representation".into()));
        }
        let this = self.clone();
        let m = self.problem.m();
        let n = self.problem.n();
        Ok(GainSchedule::from_fn(move |k, t, w| {
            let nan = || Mat::from_element(m, n, f64::NAN);
            match this.state_at(k, w) {
                Some((pbar, lambda)) => {
                    let b = this.problem.bundle_unchecked(t, w);
                    feedback_gain(&pbar, &lambda, &b).map(|(g, _)| g).unwrap_or_else(|_| nan())
                }
                None => nan(),
            }
        }))
    }

    /// Rows on a `w` grid spanning three standard deviations per step.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.problem.n();
        let m = self.problem.m();
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(riccati_header(n, m))?;
        for k in 0..self.steps {
            let t = k as f64 * self.dt;
            let spread = 3.0 * t.sqrt();
            let grid: Vec<f64> = if k == 0 {
                vec![0.0]
            } else {
                (0..=20).map(|i| -spread + spread * i as f64 / 10.0).collect()
            };
            for w in grid {
                let Some((pbar, lambda)) = self.state_at(k, w) else {
                    continue;
                };
                let b = self.problem.bundle_unchecked(t, w);
                let (gain, eig) = feedback_gain(&pbar, &lambda, &b)?;
                let pk = symmetrize(&(&pbar + riccati_driver(&pbar, &lambda, &b, &gain) * self.dt));
                out.write_record(riccati_row(t, Some(w), &pk, Some(&gain), Some(eig), m * n))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Backward induction for the stochastic Riccati equation on an ensemble.
/// The conditional mean and martingale integrand of `P_{k+1}` come from
/// `projection`; regression features are polynomials in `W(t_k)`.
pub fn solve_sre_lsmc(p: &LQProblem, ens: &PathEnsemble, projection: Projection) -> Result<RegressionRiccati> {
    if (ens.horizon() - p.horizon).abs() > 1e-9 * p.horizon.max(1.0) {
        return Err(SlqError::Config("ensemble horizon differs from problem horizon".into()));
    }
    let (n, steps, paths) = (p.n(), ens.steps(), ens.paths());
    let width = n * n;
    let dt = ens.dt();
    let coeffs = StepCoefficients::new(p, steps, dt);
    let mut next = vec![0.0; paths * width];
    for path in 0..paths {
        coeffs.terminal_with(ens.w(path, steps), |g| {
            next[path * width..(path + 1) * width].copy_from_slice(g.as_slice());
        });
    }
    let column_mean = |values: &[f64]| -> Mat {
        let mut out = Mat::zeros(n, n);
        for c in 0..width {
            let v: Vec<f64> = (0..paths).map(|q| values[q * width + c]).collect();
            out.as_mut_slice()[c] = pairwise_sum(&v) / paths as f64;
        }
        out
    };
    let mut mean_p = vec![Mat::zeros(n, n); steps + 1];
    mean_p[steps] = column_mean(&next);
    let mut pathwise = next.clone();
    let mut fits = vec![None; steps];
    let mut diagnostics = Vec::new();
    let mut worst = f64::INFINITY;
    for k in (0..steps).rev() {
        let proj = project_step(ens, projection, k, None, &next, width)?;
        let mut current = vec![0.0; paths * width];
        for path in 0..paths {
            let range = path * width..(path + 1) * width;
            let pbar = symmetrize(&Mat::from_column_slice(n, n, &proj.mean[range.clone()]));
            let lambda = symmetrize(&Mat::from_column_slice(n, n, &proj.integrand[range.clone()]));
            let w = ens.w(path, k);
            let pk = coeffs.with(k, w, |b| -> Result<Mat> {
                let (gain, eig) =
                    feedback_gain(&pbar, &lambda, b).map_err(|e| blowup(k as f64 * dt, None, e))?;
                worst = worst.min(eig);
                Ok(symmetrize(&(&pbar + riccati_driver(&pbar, &lambda, b, &gain) * dt)))
            })?;
            if pk.iter().any(|v| !v.is_finite()) {
                return Err(SlqError::RiccatiBlowup {
                    t: k as f64 * dt,
                    node: None,
                    condition: f64::INFINITY,
                });
            }
            for (c, i) in range.clone().enumerate() {
                pathwise[i] += pk.as_slice()[c] - pbar.as_slice()[c];
            }
            current[range].copy_from_slice(pk.as_slice());
        }
        mean_p[k] = column_mean(&current);
        fits[k] = proj.fits;
        diagnostics.extend(proj.diagnostics);
        next = current;
    }
    diagnostics.reverse();
    let mut p0_stderr = Mat::zeros(n, n);
    for c in 0..width {
        let v: Vec<f64> = (0..paths).map(|q| pathwise[q * width + c]).collect();
        p0_stderr.as_mut_slice()[c] = crate::sde::CostEstimate::from_samples(&v).stderr;
    }
    let basis = match projection {
        Projection::Regression(b) => Some(b.brownian_only()),
        Projection::Exact => None,
    };
    Ok(RegressionRiccati {
        problem: p.clone(),
        steps,
        dt,
        fits,
        basis,
        p0: mean_p[0].clone(),
        mean_p,
        p0_stderr,
        diagnostics,
        certificate: Certificate::new(worst),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, indefinite_weight_kernel};
    use crate::lattice::{dp_solve, level_mean};
    use crate::model::MatrixFn;
    use crate::sde::generate_ensemble;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn gain_examples() {
        let p = fixtures::indefinite_weight();
        let b = p.eval_all(0.0, 0.0).unwrap();
        let (gain, eig) = feedback_gain(&scalar(20.0 / 9.0), &scalar(0.0), &b).unwrap();
        assert!((gain[(0, 0)] + 4.0 / 9.0).abs() < 1e-14);
        assert_eq!(gain[(1, 0)], 0.0);
        assert!((eig - 11.0 / 9.0).abs() < 1e-14);

        let sc = fixtures::standard_condition();
        let mut b = sc.eval_all(0.0, 0.0).unwrap();
        let (gain, _) = feedback_gain(&scalar(0.0), &scalar(0.0), &b).unwrap();
        assert_eq!(gain, scalar(0.0));
        b.b = scalar(0.0);
        b.c = scalar(0.0);
        let (gain, _) = feedback_gain(&scalar(3.0), &scalar(0.0), &b).unwrap();
        assert_eq!(gain, scalar(0.0));
    }

    #[test]
    fn singular_hessian_is_a_gain_error() {
        let p = fixtures::indefinite_weight();
        let b = p.eval_all(0.0, 0.0).unwrap();
        // P = 1 makes the second diagonal entry of R + D'PD vanish.
        let err = feedback_gain(&scalar(1.0), &scalar(0.0), &b).unwrap_err();
        assert!(matches!(err, SlqError::SingularGain { .. }));
    }

    #[test]
    fn ode_reproduces_analytic_kernel() {
        let sol = solve_riccati_ode(&fixtures::indefinite_weight(), 10_000).unwrap();
        let err = sol
            .times
            .iter()
            .zip(&sol.p)
            .fold(0.0f64, |a, (t, p)| a.max((p[(0, 0)] - indefinite_weight_kernel(*t)).abs()));
        assert!(err <= 1e-8, "{err}");
        for (t, eig) in sol.times.iter().zip(&sol.lambda_min) {
            let want = 5.0f64.min((11.0 + 4.0 * t) / (9.0 - 4.0 * t));
            assert!((eig - want).abs() <= 1e-8);
        }
        assert!(sol.certificate.certified);
        assert!((sol.gain[0][(0, 0)] + 4.0 / 9.0).abs() < 1e-8);
    }

    #[test]
    fn ode_lyapunov_case_is_linear() {
        let mut p = fixtures::zero(1, 1, 2.0);
        p.weights.q = MatrixFn::constant(scalar(0.5));
        p.weights.g = MatrixFn::constant(scalar(3.0));
        p.weights.r = MatrixFn::constant(scalar(1.0));
        let sol = solve_riccati_ode(&p, 100).unwrap();
        for (t, pm) in sol.times.iter().zip(&sol.p) {
            assert!((pm[(0, 0)] - (3.0 + 0.5 * (2.0 - t))).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_condition_stays_well_above_one() {
        let sol = solve_riccati_ode(&fixtures::standard_condition(), 1000).unwrap();
        assert!(sol.lambda_min.iter().all(|&e| e > 1.0));
        assert!(sol.p.iter().all(|p| p[(0, 0)] >= 0.0));
    }

    #[test]
    fn ode_rejects_random_coefficients() {
        assert!(matches!(
            solve_riccati_ode(&fixtures::tanh_terminal(), 10),
            Err(SlqError::Config(_))
        ));
    }

    #[test]
    fn loss_of_convexity_is_a_blowup() {
        // G = 1 makes R + D'GD singular at the terminal time.
        let mut p = fixtures::indefinite_weight();
        p.weights.g = MatrixFn::constant(scalar(1.0));
        let err = solve_riccati_ode(&p, 100).unwrap_err();
        match err {
            SlqError::RiccatiBlowup { t, node: None, .. } => assert!((t - 1.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shrinking_the_control_penalty_lowers_the_kernel() {
        let p = fixtures::indefinite_weight();
        let base = solve_riccati_ode(&p, 2000).unwrap();
        let shifted = solve_riccati_ode(&p.with_control_penalty_shift(0.1), 2000).unwrap();
        assert!(shifted.p[0][(0, 0)] <= base.p[0][(0, 0)] + 1e-9);
    }

    #[test]
    fn difference_recursion_matches_tree_dp_for_deterministic_data() {
        let p = fixtures::standard_condition();
        let grid = solve_riccati_difference(&p, 10).unwrap();
        let dp = dp_solve(&TreeModel::build(10, &p).unwrap()).unwrap();
        for k in 0..=10 {
            for v in dp.p.level(k) {
                assert!((v - &grid.p[k]).amax() < 1e-12 * grid.p[k].amax());
            }
        }
        assert!((grid.p[0][(0, 0)] - solve_riccati_ode(&p, 1000).unwrap().p[0][(0, 0)]).abs() < 0.5);
    }

    #[test]
    fn tree_sre_examples() {
        let p = fixtures::indefinite_weight();
        let model = TreeModel::build(12, &p).unwrap();
        let sre = solve_sre_tree(&model).unwrap();
        assert!(sre.lambda.iter().all(|(_, _, l)| l.amax() <= 1e-12));
        assert!(sre.certificate.certified);
        assert!(sre.p.iter().all(|(_, _, m)| (m - m.transpose()).amax() <= 1e-10));
        let dp = dp_solve(&model).unwrap();
        let xi = Vector::from_element(1, 1.0);
        // The tree dynamic programme is exact for the discrete problem.
        assert!((dp.value(&xi) - 20.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn tree_sre_converges_at_first_order() {
        let p = fixtures::indefinite_weight();
        let ode = solve_riccati_ode(&p, 4096).unwrap().p[0][(0, 0)];
        let gap = |depth: usize| {
            let sre = solve_sre_tree(&TreeModel::build(depth, &p).unwrap()).unwrap();
            (sre.p.root()[(0, 0)] - ode).abs()
        };
        let (g6, g12, g16) = (gap(6), gap(12), gap(16));
        assert!((0.04..0.06).contains(&g12), "{g12}");
        assert!(g16 <= 0.05, "{g16}");
        let ratio = g6 / g12;
        assert!((1.7..2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn tree_certificate_tracks_the_analytic_profile() {
        let p = fixtures::indefinite_weight();
        let depth = 16;
        let model = TreeModel::build(depth, &p).unwrap();
        let sre = solve_sre_tree(&model).unwrap();
        // The Hessian at level k is built from the level-(k+1) kernel.
        for k in [0, 5, 10, 15] {
            let t = model.tree().time(k + 1);
            let want = 5.0f64.min((11.0 + 4.0 * t) / (9.0 - 4.0 * t));
            for e in sre.lambda_min.level(k).iter().take(8) {
                assert!((e - want).abs() <= 0.05, "level {k}: {e} vs {want}");
            }
        }
    }

    #[test]
    fn zero_problem_has_zero_kernel_on_every_route() {
        let p = fixtures::zero(2, 1, 1.0);
        let tree = solve_sre_tree(&TreeModel::build(6, &p).unwrap()).unwrap();
        assert!(tree.p.iter().all(|(_, _, m)| m.amax() == 0.0));
        assert!(tree.lambda.iter().all(|(_, _, m)| m.amax() == 0.0));
        let ode = solve_riccati_ode(&p, 50).unwrap();
        assert!(ode.p.iter().all(|m| m.amax() == 0.0));
        let ens = generate_ensemble(10, 200, 1.0, 1).unwrap();
        let lsmc = solve_sre_lsmc(&p, &ens, Projection::Regression(RegressionBasis::brownian(3))).unwrap();
        assert_eq!(lsmc.p0.amax(), 0.0);
    }

    #[test]
    fn martingale_terminal_is_conditioned_exactly() {
        let p = fixtures::tanh_terminal();
        let depth = 10;
        let model = TreeModel::build(depth, &p).unwrap();
        let sre = solve_sre_tree(&model).unwrap();
        let tree = model.tree();
        for k in [0, 3, 7] {
            for j in 0..1usize << k {
                // Average G over the leaves below the node.
                let span = 1usize << (depth - k);
                let leaves: Vec<f64> = (j * span..(j + 1) * span)
                    .map(|l| 2.0 + tree.w(depth, l).tanh())
                    .collect();
                let want = level_mean(&leaves);
                assert!((sre.p.get(k, j)[(0, 0)] - want).abs() < 1e-13);
            }
        }
        for (k, j, l) in sre.lambda.iter() {
            let (up, down) = (sre.p.get(k + 1, 2 * j)[(0, 0)], sre.p.get(k + 1, 2 * j + 1)[(0, 0)]);
            assert!((l[(0, 0)] - (up - down) / (2.0 * tree.sqrt_dt())).abs() < 1e-12);
        }
    }

    #[test]
    fn lsmc_with_exact_expectations_matches_tree() {
        let p = fixtures::markov_random();
        let model = TreeModel::build(10, &p).unwrap();
        let tree = solve_sre_tree(&model).unwrap();
        let ens = PathEnsemble::from_tree(model.tree());
        let lsmc = solve_sre_lsmc(&p, &ens, Projection::Exact).unwrap();
        for k in 0..=10 {
            let level: Vec<f64> = tree.p.level(k).iter().map(|m| m[(0, 0)]).collect();
            assert!((lsmc.mean_p[k][(0, 0)] - level_mean(&level)).abs() < 1e-10);
        }
        assert!((lsmc.certificate.lambda_min - tree.certificate.lambda_min).abs() < 1e-10);
    }

    #[test]
    fn lsmc_example_matches_analytic_value() {
        let p = fixtures::indefinite_weight();
        let ens = generate_ensemble(100, 100_000, 1.0, 21).unwrap();
        let sol = solve_sre_lsmc(&p, &ens, Projection::Regression(RegressionBasis::brownian(3))).unwrap();
        assert!((sol.p0[(0, 0)] - 20.0 / 9.0).abs() <= 0.02, "{}", sol.p0[(0, 0)]);
        let gain = sol.gain_schedule().unwrap().eval(0, 0.0, 0.0);
        assert!((gain[(0, 0)] + sol.p0[(0, 0)] / 5.0).abs() < 0.01);
    }

    #[test]
    fn lsmc_tanh_terminal_matches_deep_tree() {
        let p = fixtures::tanh_terminal();
        let tree = solve_sre_tree(&TreeModel::build(16, &p).unwrap()).unwrap();
        let ens = generate_ensemble(50, 50_000, 1.0, 22).unwrap();
        let sol = solve_sre_lsmc(&p, &ens, Projection::Regression(RegressionBasis::brownian(3))).unwrap();
        let gap = (sol.p0[(0, 0)] - tree.p.root()[(0, 0)]).abs();
        assert!(gap <= 3.0 * sol.p0_stderr[(0, 0)] + 1e-12, "{gap} vs {}", sol.p0_stderr[(0, 0)]);
    }

    #[test]
    fn csv_layouts() {
        let p = fixtures::indefinite_weight();
        let sol = solve_riccati_ode(&p, 4).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,w,p00,theta00,theta10,lambda_min");
        assert_eq!(text.lines().count(), 6);
        let model = TreeModel::build(3, &p).unwrap();
        let tree = solve_sre_tree(&model).unwrap();
        let mut buf = Vec::new();
        tree.write_csv(&model, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 15);
    }
}
