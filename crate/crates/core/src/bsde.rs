//! Backward solvers on path ensembles: least-squares conditional
//! expectations, the linear adjoint equation, and the uncontrolled cost
//! kernel `(M, N)`.

use std::io::Write;

use nalgebra::{Cholesky, SymmetricEigen};

use crate::error::{Result, SlqError};
use crate::lattice::{backward_bsde_tree, TreeModel, TreeProcess};
use crate::model::{symmetrize, CoefficientBundle, LQProblem, Mat, Vector};
use crate::sde::{gemv_acc, gemv_t_acc, pairwise_sum, Measure, PathEnsemble, StateEnsemble, StepCoefficients};

/// Relative ridge added to the normalised Gram matrix.
pub const RIDGE: f64 = 1e-10;
const CONSTANT_COLUMN_TOL: f64 = 1e-12;

/// Row-major feature matrix without the constant column.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "design data has the wrong length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisFamily {
    /// Monomials in `W(t_k)` and the state components.
    BrownianAndState,
    /// Monomials in `W(t_k)` only.
    Brownian,
}

/// Total-degree polynomial basis. The constant function is always included.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegressionBasis {
    pub family: BasisFamily,
    pub degree: u32,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::brownian_and_state(3)
    }
}

impl RegressionBasis {
    pub fn brownian_and_state(degree: u32) -> Self {
        Self {
            family: BasisFamily::BrownianAndState,
            degree,
        }
    }

    pub fn brownian(degree: u32) -> Self {
        Self {
            family: BasisFamily::Brownian,
            degree,
        }
    }

    /// The same degree in `W` alone.
    pub fn brownian_only(&self) -> Self {
        Self::brownian(self.degree)
    }

    fn variables(&self, n: usize) -> usize {
        match self.family {
            BasisFamily::BrownianAndState => 1 + n,
            BasisFamily::Brownian => 1,
        }
    }

    /// Exponent tuples of the non-constant monomials, by total degree.
    pub fn exponents(&self, n: usize) -> Vec<Vec<u32>> {
        fn fill(vars: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if prefix.len() == vars - 1 {
                prefix.push(remaining);
                out.push(prefix.clone());
                prefix.pop();
                return;
            }
            for e in (0..=remaining).rev() {
                prefix.push(e);
                fill(vars, remaining - e, prefix, out);
                prefix.pop();
            }
        }
        let vars = self.variables(n);
        let mut out = Vec::new();
        for total in 1..=self.degree {
            fill(vars, total, &mut Vec::with_capacity(vars), &mut out);
        }
        out
    }

    /// Number of basis functions including the constant.
    pub fn feature_count(&self, n: usize) -> usize {
        1 + self.exponents(n).len()
    }

    /// Evaluates the non-constant features. `x` is row-major `rows x n` and
    /// is ignored by the Brownian family.
    pub fn design(&self, w: &[f64], x: Option<&[f64]>, n: usize) -> Design {
        let exps = self.exponents(n);
        let vars = self.variables(n);
        let rows = w.len();
        let mut data = Vec::with_capacity(rows * exps.len());
        let mut values = vec![0.0; vars];
        for i in 0..rows {
            values[0] = w[i];
            if vars > 1 {
                let x = x.expect("state features required by this basis");
                values[1..].copy_from_slice(&x[i * n..(i + 1) * n]);
            }
            for e in &exps {
                let mut v = 1.0;
                for (value, &power) in values.iter().zip(e) {
                    if power > 0 {
                        v *= value.powi(power as i32);
                    }
                }
                data.push(v);
            }
        }
        Design::new(rows, exps.len(), data)
    }
}

/// Per-step regression diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDiagnostics {
    pub step: usize,
    pub kept_features: usize,
    pub condition: f64,
    pub residual_rms: f64,
}

/// A fitted linear map from raw features to targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    total_cols: usize,
    kept: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `kept x targets`, on centred and scaled features.
    beta: Mat,
    intercept: Vec<f64>,
    pub residual_rms: f64,
}

impl LinearFit {
    pub fn targets(&self) -> usize {
        self.intercept.len()
    }

    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        let mut out = self.intercept.clone();
        for (r, &c) in self.kept.iter().enumerate() {
            let f = (features[c] - self.mean[r]) / self.scale[r];
            for (t, o) in out.iter_mut().enumerate() {
                *o += f * self.beta[(r, t)];
            }
        }
        out
    }

    /// Coefficients on the raw basis, constant first: `(1 + cols) x targets`.
    pub fn coefficients(&self) -> Mat {
        let t = self.targets();
        let mut out = Mat::zeros(1 + self.total_cols, t);
        for k in 0..t {
            let mut constant = self.intercept[k];
            for (r, &c) in self.kept.iter().enumerate() {
                let raw = self.beta[(r, k)] / self.scale[r];
                out[(1 + c, k)] = raw;
                constant -= raw * self.mean[r];
            }
            out[(0, k)] = constant;
        }
        out
    }
}

/// A factored least-squares problem reusable across target sets.
pub struct Regressor {
    rows: usize,
    total_cols: usize,
    kept: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Centred and scaled kept columns, row-major.
    scaled: Vec<f64>,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    condition: f64,
}

fn regression_error(reason: impl Into<String>) -> SlqError {
    SlqError::Regression {
        step: 0,
        reason: reason.into(),
    }
}

fn at_step(err: SlqError, step: usize) -> SlqError {
    match err {
        SlqError::Regression { reason, .. } => SlqError::Regression { step, reason },
        other => other,
    }
}

impl Regressor {
    pub fn new(design: &Design) -> Result<Self> {
        let (rows, cols) = (design.rows, design.cols);
        if rows == 0 {
            return Err(regression_error("no samples"));
        }
        let inv_rows = 1.0 / rows as f64;
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        let mut column = vec![0.0; rows];
        for c in 0..cols {
            for (i, v) in column.iter_mut().enumerate() {
                *v = design.data[i * cols + c];
            }
            if column.iter().any(|v| !v.is_finite()) {
                return Err(regression_error(format!("non-finite feature in column {c}")));
            }
            let mu = pairwise_sum(&column) * inv_rows;
            let raw_sq: Vec<f64> = column.iter().map(|v| v * v).collect();
            let raw_rms = (pairwise_sum(&raw_sq) * inv_rows).sqrt();
            let centred_sq: Vec<f64> = column.iter().map(|v| (v - mu) * (v - mu)).collect();
            let rms = (pairwise_sum(&centred_sq) * inv_rows).sqrt();
            if rms > CONSTANT_COLUMN_TOL * raw_rms && rms > 0.0 {
                kept.push(c);
                mean.push(mu);
                scale.push(rms);
            }
        }
        let p = kept.len();
        let mut scaled = vec![0.0; rows * p];
        for i in 0..rows {
            let src = design.row(i);
            let dst = &mut scaled[i * p..(i + 1) * p];
            for (r, &c) in kept.iter().enumerate() {
                dst[r] = (src[c] - mean[r]) / scale[r];
            }
        }
        if p == 0 {
            return Ok(Self {
                rows,
                total_cols: cols,
                kept,
                mean,
                scale,
                scaled,
                chol: None,
                condition: 1.0,
            });
        }
        let mut gram = Mat::zeros(p, p);
        for i in 0..rows {
            let f = &scaled[i * p..(i + 1) * p];
            for a in 0..p {
                let fa = f[a];
                for b in 0..=a {
                    gram[(a, b)] += fa * f[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        gram *= inv_rows;
        let ridge = RIDGE * gram.trace() / p as f64;
        for a in 0..p {
            gram[(a, a)] += ridge;
        }
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let condition = eig.amax() / eig.min().abs();
        let chol = Cholesky::new(gram).ok_or_else(|| {
            regression_error(format!("rank collapse with {p} features (condition {condition:.3e})"))
        })?;
        Ok(Self {
            rows,
            total_cols: cols,
            kept,
            mean,
            scale,
            scaled,
            chol: Some(chol),
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn kept_features(&self) -> usize {
        self.kept.len()
    }

    /// Fits row-major `rows x width` targets; returns the fit and fitted values.
    pub fn fit(&self, targets: &[f64], width: usize) -> (LinearFit, Vec<f64>) {
        let rows = self.rows;
        assert_eq!(targets.len(), rows * width, "targets have the wrong length");
        let p = self.kept.len();
        let inv_rows = 1.0 / rows as f64;
        let mut column = vec![0.0; rows];
        let intercept: Vec<f64> = (0..width)
            .map(|t| {
                for (i, v) in column.iter_mut().enumerate() {
                    *v = targets[i * width + t];
                }
                pairwise_sum(&column) * inv_rows
            })
            .collect();
        let mut beta = Mat::zeros(p, width);
        if let Some(chol) = &self.chol {
            for i in 0..rows {
                let f = &self.scaled[i * p..(i + 1) * p];
                let y = &targets[i * width..(i + 1) * width];
                for t in 0..width {
                    let centred = y[t] - intercept[t];
                    for a in 0..p {
                        beta[(a, t)] += f[a] * centred;
                    }
                }
            }
            beta *= inv_rows;
            chol.solve_mut(&mut beta);
        }
        let mut fitted = vec![0.0; rows * width];
        let mut sq = vec![0.0; rows];
        for i in 0..rows {
            let f = &self.scaled[i * p..(i + 1) * p];
            let out = &mut fitted[i * width..(i + 1) * width];
            let mut r2 = 0.0;
            for t in 0..width {
                let mut v = intercept[t];
                for a in 0..p {
                    v += f[a] * beta[(a, t)];
                }
                out[t] = v;
                let e = targets[i * width + t] - v;
                r2 += e * e;
            }
            sq[i] = r2;
        }
        let residual_rms = (pairwise_sum(&sq) * inv_rows / width.max(1) as f64).sqrt();
        let fit = LinearFit {
            total_cols: self.total_cols,
            kept: self.kept.clone(),
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            beta,
            intercept,
            residual_rms,
        };
        (fit, fitted)
    }
}

/// Ridge least squares of row-major `rows x width` targets on `design`.
/// Features are centred and scaled; near-constant columns are dropped and
/// absorbed by the intercept.
pub fn regress(design: &Design, targets: &[f64], width: usize) -> Result<(LinearFit, Vec<f64>)> {
    Ok(Regressor::new(design)?.fit(targets, width))
}

/// How conditional expectations `E[. | F_{t_k}]` are computed on an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Block averages over a tree-enumerated ensemble.
    Exact,
    Regression(RegressionBasis),
}

/// Conditional mean and martingale integrand of a step-`k+1` quantity.
pub(crate) struct StepProjection {
    pub mean: Vec<f64>,
    pub integrand: Vec<f64>,
    pub fits: Option<(LinearFit, LinearFit)>,
    pub diagnostics: Option<RegressionDiagnostics>,
}

/// Projects row-major `paths x width` values at step `k + 1` onto step `k`:
/// the mean `E[Y | F_k]` and the integrand `E[(Y - E[Y | F_k]) dW] / dt`.
pub(crate) fn project_step(
    ens: &PathEnsemble,
    projection: Projection,
    k: usize,
    state: Option<(&[f64], usize)>,
    next: &[f64],
    width: usize,
) -> Result<StepProjection> {
    let paths = ens.paths();
    let dt = ens.dt();
    let integrand_targets = |mean: &[f64]| {
        let mut out = vec![0.0; paths * width];
        for p in 0..paths {
            let dw = ens.dw(p, k) / dt;
            for t in 0..width {
                let i = p * width + t;
                out[i] = (next[i] - mean[i]) * dw;
            }
        }
        out
    };
    match projection {
        Projection::Exact => {
            if ens.measure() != Measure::TreeEnumeration {
                return Err(SlqError::Config(
                    "exact conditional expectations need a tree-enumerated ensemble".into(),
                ));
            }
            let mean = block_average(next, width, paths, 1 << (ens.steps() - k));
            let targets = integrand_targets(&mean);
            let integrand = block_average(&targets, width, paths, 1 << (ens.steps() - k));
            Ok(StepProjection {
                mean,
                integrand,
                fits: None,
                diagnostics: None,
            })
        }
        Projection::Regression(basis) => {
            let w = ens.w_column(k);
            let (x, n) = match state {
                Some((x, n)) => (Some(x), n),
                None => (None, 0),
            };
            let basis = if x.is_none() { basis.brownian_only() } else { basis };
            let design = basis.design(&w, x, n);
            let reg = Regressor::new(&design).map_err(|e| at_step(e, k))?;
            let (fit_mean, mean) = reg.fit(next, width);
            let targets = integrand_targets(&mean);
            let (fit_int, integrand) = reg.fit(&targets, width);
            let diagnostics = RegressionDiagnostics {
                step: k,
                kept_features: reg.kept_features(),
                condition: reg.condition(),
                residual_rms: fit_mean.residual_rms,
            };
            Ok(StepProjection {
                mean,
                integrand,
                fits: Some((fit_mean, fit_int)),
                diagnostics: Some(diagnostics),
            })
        }
    }
}

fn block_average(values: &[f64], width: usize, paths: usize, block: usize) -> Vec<f64> {
    let mut out = vec![0.0; paths * width];
    let mut column = vec![0.0; block];
    for start in (0..paths).step_by(block) {
        for t in 0..width {
            for (i, c) in column.iter_mut().enumerate() {
                *c = values[(start + i) * width + t];
            }
            let avg = pairwise_sum(&column) / block as f64;
            for i in 0..block {
                out[(start + i) * width + t] = avg;
            }
        }
    }
    out
}

fn scatter(dst: &mut [f64], src: &[f64], paths: usize, stride: usize, offset: usize, width: usize) {
    for p in 0..paths {
        let base = p * stride + offset;
        dst[base..base + width].copy_from_slice(&src[p * width..(p + 1) * width]);
    }
}

/// Solution of the adjoint equation on an ensemble.
#[derive(Clone, Debug)]
pub struct BackwardSolution {
    pub n: usize,
    pub steps: usize,
    pub paths: usize,
    y: Vec<f64>,
    y_pred: Vec<f64>,
    z: Vec<f64>,
    /// Fits of the conditional mean and the integrand per step (regression only).
    pub fits: Vec<Option<(LinearFit, LinearFit)>>,
    pub diagnostics: Vec<RegressionDiagnostics>,
    /// `dt * coefficient bound < 1`.
    pub stable_step: bool,
}

impl BackwardSolution {
    pub fn y(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * (self.steps + 1) + step) * self.n;
        &self.y[i..i + self.n]
    }

    /// Conditional mean `E[Y_{k+1} | F_k]` used by the explicit step.
    pub fn y_pred(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.steps + step) * self.n;
        &self.y_pred[i..i + self.n]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.steps + step) * self.n;
        &self.z[i..i + self.n]
    }

    /// Path average of `Y(., k)`.
    pub fn mean_y(&self, step: usize) -> Vector {
        Vector::from_iterator(
            self.n,
            (0..self.n).map(|i| {
                let v: Vec<f64> = (0..self.paths).map(|p| self.y(p, step)[i]).collect();
                pairwise_sum(&v) / self.paths as f64
            }),
        )
    }
}

/// Writes `step,kept_features,condition,residual_rms` rows.
pub fn write_diagnostics_csv<W: Write>(diagnostics: &[RegressionDiagnostics], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["step", "kept_features", "condition", "residual_rms"])?;
    for d in diagnostics {
        out.write_record(&[
            d.step.to_string(),
            d.kept_features.to_string(),
            format!("{:.6e}", d.condition),
            format!("{:.6e}", d.residual_rms),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn check_ensemble(p: &LQProblem, ens: &PathEnsemble) -> Result<()> {
    if (ens.horizon() - p.horizon).abs() > 1e-9 * p.horizon.max(1.0) {
        return Err(SlqError::Config(format!(
            "ensemble horizon {} differs from problem horizon {}",
            ens.horizon(),
            p.horizon
        )));
    }
    Ok(())
}

/// Explicit backward scheme for
/// `dY = -(A'Y + C'Z + QX + S'u) ds + Z dW`, `Y(T) = G X(T)`,
/// along the recorded state and control.
pub fn solve_adjoint(
    p: &LQProblem,
    ens: &PathEnsemble,
    se: &StateEnsemble,
    projection: Projection,
) -> Result<BackwardSolution> {
    check_ensemble(p, ens)?;
    let (n, steps, paths) = (p.n(), ens.steps(), ens.paths());
    if se.n != n || se.m != p.m() || se.steps != steps || se.paths != paths {
        return Err(SlqError::Dimension("state ensemble does not match problem/ensemble".into()));
    }
    let dt = ens.dt();
    let coeffs = StepCoefficients::new(p, steps, dt);
    let mut y = vec![0.0; paths * (steps + 1) * n];
    let mut y_pred = vec![0.0; paths * steps * n];
    let mut z = vec![0.0; paths * steps * n];
    let mut next = vec![0.0; paths * n];
    for path in 0..paths {
        let x = se.x(path, steps);
        let out = &mut next[path * n..(path + 1) * n];
        coeffs.terminal_with(ens.w(path, steps), |g| gemv_acc(out, g, x, 1.0));
    }
    scatter(&mut y, &next, paths, (steps + 1) * n, steps * n, n);
    let mut fits = vec![None; steps];
    let mut diagnostics = Vec::new();
    let mut state = vec![0.0; paths * n];
    for k in (0..steps).rev() {
        let uses_state = matches!(
            projection,
            Projection::Regression(RegressionBasis {
                family: BasisFamily::BrownianAndState,
                ..
            })
        );
        if uses_state {
            for path in 0..paths {
                state[path * n..(path + 1) * n].copy_from_slice(se.x(path, k));
            }
        }
        let proj = project_step(ens, projection, k, uses_state.then_some((&state[..], n)), &next, n)?;
        let mut current = proj.mean.clone();
        for path in 0..paths {
            let (x, u) = (se.x(path, k), se.u(path, k));
            let ybar = &proj.mean[path * n..(path + 1) * n];
            let zk = &proj.integrand[path * n..(path + 1) * n];
            let out = &mut current[path * n..(path + 1) * n];
            coeffs.with(k, ens.w(path, k), |b| {
                gemv_t_acc(out, &b.a, ybar, dt);
                gemv_t_acc(out, &b.c, zk, dt);
                gemv_acc(out, &b.q, x, dt);
                gemv_t_acc(out, &b.s, u, dt);
            });
        }
        scatter(&mut y_pred, &proj.mean, paths, steps * n, k * n, n);
        scatter(&mut z, &proj.integrand, paths, steps * n, k * n, n);
        scatter(&mut y, &current, paths, (steps + 1) * n, k * n, n);
        fits[k] = proj.fits;
        diagnostics.extend(proj.diagnostics);
        next = current;
    }
    diagnostics.reverse();
    Ok(BackwardSolution {
        n,
        steps,
        paths,
        y,
        y_pred,
        z,
        fits,
        diagnostics,
        stable_step: dt * p.coeffs.bound < 1.0,
    })
}

/// Discretisation of the kernel equation
/// `dM = -(MA + A'M + C'MC + NC + C'N + Q) ds + N dW`, `M(T) = G`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelScheme {
    /// One explicit Euler step per level.
    #[default]
    Explicit,
    /// `M_k = E[F' M_{k+1} F] + Q dt` with `F = I + A dt + C dW`: the exact
    /// second moment of the Euler state map, so `xi' M_0 xi` equals the
    /// discrete uncontrolled cost.
    Exact,
}

/// Driver of the kernel step at `(M_bar, N)`.
pub(crate) fn kernel_driver(b: &CoefficientBundle, mbar: &Mat, nk: &Mat, dt: f64, scheme: KernelScheme) -> Mat {
    let mut f = mbar * &b.a;
    f += b.a.transpose() * mbar;
    f += b.c.transpose() * mbar * &b.c;
    f += nk * &b.c;
    f += b.c.transpose() * nk;
    f += &b.q;
    if scheme == KernelScheme::Exact {
        let at = b.a.transpose();
        f += (&at * mbar * &b.a + &at * nk * &b.c + b.c.transpose() * nk * &b.a) * dt;
    }
    symmetrize(&f)
}

/// Sampled kernel norm against the a-priori bound implied by the declared
/// coefficient bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelBoundMonitor {
    pub max_norm: f64,
    pub analytic_bound: f64,
    /// `max_norm > 10 * analytic_bound`.
    pub flagged: bool,
}

/// `e^{bT} (|G|^2 + 2KT)^{1/2}` with `K = max(2|A| + |C|^2, 2|C|, |Q|)` and
/// `b = K^2 + 2K`, operator norms bounded by `n * entry bound`.
pub fn kernel_norm_bound(p: &LQProblem) -> f64 {
    let n = p.n() as f64;
    let a = n * p.coeffs.bound;
    let c = n * p.coeffs.bound;
    let q = n * p.weights.bound;
    let g = n * p.weights.bound;
    let k = (2.0 * a + c * c).max(2.0 * c).max(q);
    let rate = k * k + 2.0 * k;
    (rate * p.horizon).exp() * (g * g + 2.0 * k * p.horizon).sqrt()
}

fn spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 1 {
        m[(0, 0)].abs()
    } else {
        SymmetricEigen::new(m.clone()).eigenvalues.amax()
    }
}

impl KernelBoundMonitor {
    fn new(p: &LQProblem, max_norm: f64) -> Self {
        let analytic_bound = kernel_norm_bound(p);
        Self {
            max_norm,
            analytic_bound,
            flagged: !max_norm.is_finite() || max_norm > 10.0 * analytic_bound,
        }
    }
}

/// Sampled `(M, N)` on an ensemble.
#[derive(Clone, Debug)]
pub struct KernelSolution {
    pub n: usize,
    pub steps: usize,
    pub paths: usize,
    kernel: Vec<f64>,
    integrand: Vec<f64>,
    /// Fits of `M` and `N` in `W(t_k)` per step (regression only).
    pub fits: Vec<Option<(LinearFit, LinearFit)>>,
    pub diagnostics: Vec<RegressionDiagnostics>,
    pub monitor: KernelBoundMonitor,
    pub stable_step: bool,
}

impl KernelSolution {
    pub fn kernel(&self, path: usize, step: usize) -> Mat {
        let w = self.n * self.n;
        let i = (path * (self.steps + 1) + step) * w;
        Mat::from_column_slice(self.n, self.n, &self.kernel[i..i + w])
    }

    pub fn integrand(&self, path: usize, step: usize) -> Mat {
        let w = self.n * self.n;
        let i = (path * self.steps + step) * w;
        Mat::from_column_slice(self.n, self.n, &self.integrand[i..i + w])
    }

    pub fn mean_kernel(&self, step: usize) -> Mat {
        let w = self.n * self.n;
        let mut out = Mat::zeros(self.n, self.n);
        for c in 0..w {
            let v: Vec<f64> = (0..self.paths)
                .map(|p| self.kernel[(p * (self.steps + 1) + step) * w + c])
                .collect();
            out.as_mut_slice()[c] = pairwise_sum(&v) / self.paths as f64;
        }
        out
    }

    /// Largest `|N|` entry over all samples.
    pub fn max_abs_integrand(&self) -> f64 {
        self.integrand.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Largest `|M - M'|` entry over all samples.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for p in 0..self.paths {
            for k in 0..=self.steps {
                let m = self.kernel(p, k);
                worst = worst.max((&m - m.transpose()).amax());
            }
        }
        worst
    }
}

/// Backward induction for `(M, N)` on an ensemble. Regression features are
/// polynomials in `W(t_k)`.
pub fn solve_cost_kernel(
    p: &LQProblem,
    ens: &PathEnsemble,
    projection: Projection,
    scheme: KernelScheme,
) -> Result<KernelSolution> {
    check_ensemble(p, ens)?;
    let (n, steps, paths) = (p.n(), ens.steps(), ens.paths());
    let width = n * n;
    let dt = ens.dt();
    let coeffs = StepCoefficients::new(p, steps, dt);
    let mut kernel = vec![0.0; paths * (steps + 1) * width];
    let mut integrand = vec![0.0; paths * steps * width];
    let mut next = vec![0.0; paths * width];
    let mut max_norm = 0.0f64;
    for path in 0..paths {
        coeffs.terminal_with(ens.w(path, steps), |g| {
            next[path * width..(path + 1) * width].copy_from_slice(g.as_slice());
            max_norm = max_norm.max(spectral_norm(g));
        });
    }
    scatter(&mut kernel, &next, paths, (steps + 1) * width, steps * width, width);
    let mut fits = vec![None; steps];
    let mut diagnostics = Vec::new();
    for k in (0..steps).rev() {
        let proj = project_step(ens, projection, k, None, &next, width)?;
        let mut current = vec![0.0; paths * width];
        for path in 0..paths {
            let range = path * width..(path + 1) * width;
            let mbar = Mat::from_column_slice(n, n, &proj.mean[range.clone()]);
            let nk = Mat::from_column_slice(n, n, &proj.integrand[range.clone()]);
            let mk = coeffs.with(k, ens.w(path, k), |b| {
                let f = kernel_driver(b, &mbar, &nk, dt, scheme);
                symmetrize(&(&mbar + f * dt))
            });
            if mk.iter().any(|v| !v.is_finite()) {
                return Err(SlqError::Simulation { path, step: k });
            }
            max_norm = max_norm.max(spectral_norm(&mk));
            current[range].copy_from_slice(mk.as_slice());
        }
        scatter(&mut integrand, &proj.integrand, paths, steps * width, k * width, width);
        scatter(&mut kernel, &current, paths, (steps + 1) * width, k * width, width);
        fits[k] = proj.fits;
        diagnostics.extend(proj.diagnostics);
        next = current;
    }
    diagnostics.reverse();
    Ok(KernelSolution {
        n,
        steps,
        paths,
        kernel,
        integrand,
        fits,
        diagnostics,
        monitor: KernelBoundMonitor::new(p, max_norm),
        stable_step: dt * p.coeffs.bound < 1.0,
    })
}

/// `(M, N)` on a tree with exact conditional expectations.
#[derive(Clone, Debug)]
pub struct TreeKernel {
    pub kernel: TreeProcess<Mat>,
    pub integrand: TreeProcess<Mat>,
    pub monitor: KernelBoundMonitor,
}

pub fn solve_cost_kernel_tree(model: &TreeModel, scheme: KernelScheme) -> TreeKernel {
    let tree = model.tree();
    let dt = tree.dt();
    let leaves = (0..1usize << tree.depth()).map(|j| model.terminal(j).clone()).collect();
    let (kernel, integrand) = backward_bsde_tree(tree, leaves, |k, j, mbar, nk| {
        kernel_driver(model.bundle(k, j), mbar, nk, dt, scheme)
    });
    let max_norm = kernel.iter().fold(0.0f64, |acc, (_, _, m)| acc.max(spectral_norm(m)));
    TreeKernel {
        kernel,
        integrand,
        monitor: KernelBoundMonitor::new(model.problem(), max_norm),
    }
}
