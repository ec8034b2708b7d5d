//! Monte Carlo world: Brownian path ensembles, Euler-Maruyama simulation
//! under open-loop or feedback controls, and cost estimation.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, SlqError};
use crate::lattice::BernoulliTree;
use crate::model::{CoefficientBundle, LQProblem, Mat, Vector};

/// Sum with pairwise (cascade) reduction. Order depends only on the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Sample mean and standard error `std / sqrt(M)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let count = samples.len();
        if count == 0 {
            return Self { mean: 0.0, stderr: 0.0 };
        }
        let mean = pairwise_sum(samples) / count as f64;
        if count == 1 {
            return Self { mean, stderr: 0.0 };
        }
        let sq: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&sq) / (count - 1) as f64;
        Self {
            mean,
            stderr: (var / count as f64).sqrt(),
        }
    }
}

/// How an ensemble's paths were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    /// i.i.d. Gaussian increments.
    MonteCarlo { seed: u64 },
    /// All `2^N` paths of a Bernoulli tree, equally weighted.
    TreeEnumeration,
}

/// Brownian paths on a uniform grid, stored path-major as `W(path, k)`.
#[derive(Clone)]
pub struct PathEnsemble {
    steps: usize,
    paths: usize,
    horizon: f64,
    dt: f64,
    measure: Measure,
    w: Vec<f64>,
}

impl fmt::Debug for PathEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PathEnsemble")
            .field("steps", &self.steps)
            .field("paths", &self.paths)
            .field("horizon", &self.horizon)
            .field("measure", &self.measure)
            .finish()
    }
}

/// Draws `paths` Brownian paths with `steps` Gaussian increments of variance
/// `dt = horizon / steps`, from a ChaCha8 stream seeded with `seed`.
pub fn generate_ensemble(steps: usize, paths: usize, horizon: f64, seed: u64) -> Result<PathEnsemble> {
    if steps == 0 || paths == 0 {
        return Err(SlqError::Config(format!(
            "ensemble needs at least one step and one path (steps = {steps}, paths = {paths})"
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SlqError::Config(format!("horizon must be positive, got {horizon}")));
    }
    let dt = horizon / steps as f64;
    let sd = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(paths * (steps + 1));
    for _ in 0..paths {
        let mut acc = 0.0;
        w.push(0.0);
        for _ in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += sd * z;
            w.push(acc);
        }
    }
    Ok(PathEnsemble {
        steps,
        paths,
        horizon,
        dt,
        measure: Measure::MonteCarlo { seed },
        w,
    })
}

impl PathEnsemble {
    /// Every path of `tree` as an ensemble member. Path `p` follows the leaf
    /// `(N, p)`, so its node at level `k` is `(k, p >> (N - k))`.
    pub fn from_tree(tree: &BernoulliTree) -> Self {
        assert_eq!(tree.t0(), 0.0, "tree enumeration starts at t = 0");
        let steps = tree.depth();
        let paths = 1usize << steps;
        let mut w = Vec::with_capacity(paths * (steps + 1));
        for p in 0..paths {
            for k in 0..=steps {
                w.push(tree.w(k, p >> (steps - k)));
            }
        }
        Self {
            steps,
            paths,
            horizon: tree.time(steps),
            dt: tree.dt(),
            measure: Measure::TreeEnumeration,
            w,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn seed(&self) -> Option<u64> {
        match self.measure {
            Measure::MonteCarlo { seed } => Some(seed),
            Measure::TreeEnumeration => None,
        }
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// `W(t_0..t_N)` along one path.
    pub fn path(&self, path: usize) -> &[f64] {
        let stride = self.steps + 1;
        &self.w[path * stride..(path + 1) * stride]
    }

    pub fn w(&self, path: usize, step: usize) -> f64 {
        self.w[path * (self.steps + 1) + step]
    }

    /// Increment `W(t_{k+1}) - W(t_k)`.
    pub fn dw(&self, path: usize, step: usize) -> f64 {
        let base = path * (self.steps + 1) + step;
        self.w[base + 1] - self.w[base]
    }

    /// `W(t_k)` across all paths.
    pub fn w_column(&self, step: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.w(p, step)).collect()
    }

    pub fn dw_column(&self, step: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.dw(p, step)).collect()
    }

    /// Writes `path,step,t,w` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["path", "step", "t", "w"])?;
        for p in 0..self.paths {
            for k in 0..=self.steps {
                out.write_record(&[
                    p.to_string(),
                    k.to_string(),
                    format!("{:.17e}", self.time(k)),
                    format!("{:.17e}", self.w(p, k)),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-path per-step `m`-vectors, path-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTable {
    steps: usize,
    paths: usize,
    m: usize,
    values: Vec<f64>,
}

impl ControlTable {
    pub fn zeros(ens: &PathEnsemble, m: usize) -> Self {
        Self {
            steps: ens.steps(),
            paths: ens.paths(),
            m,
            values: vec![0.0; ens.paths() * ens.steps() * m],
        }
    }

    /// Builds an adapted table: the generator sees `(path, k, t_k, W(t_0..=t_k))`
    /// and nothing later.
    pub fn from_adapted(
        ens: &PathEnsemble,
        m: usize,
        generator: impl Fn(usize, usize, f64, &[f64]) -> Vec<f64>,
    ) -> Self {
        let mut table = Self::zeros(ens, m);
        for p in 0..ens.paths() {
            let path = ens.path(p);
            for k in 0..ens.steps() {
                let v = generator(p, k, ens.time(k), &path[..=k]);
                assert_eq!(v.len(), m, "generator returned the wrong control dimension");
                table.get_mut(p, k).copy_from_slice(&v);
            }
        }
        table
    }

    pub(crate) fn from_raw(steps: usize, paths: usize, m: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), steps * paths * m);
        Self { steps, paths, m, values }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.steps + step) * self.m;
        &self.values[i..i + self.m]
    }

    pub fn get_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let i = (path * self.steps + step) * self.m;
        &mut self.values[i..i + self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ControlTable, b: f64) -> ControlTable {
        assert_eq!(self.values.len(), other.values.len());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self { values, ..*self }
    }
}

type GainFn = dyn Fn(usize, f64, f64) -> Mat + Send + Sync;

/// Feedback gain `Theta(t_k, w)` as an `m x n` matrix.
#[derive(Clone)]
pub struct GainSchedule {
    f: Arc<GainFn>,
}

impl GainSchedule {
    /// `f(step, t, w)`.
    pub fn from_fn(f: impl Fn(usize, f64, f64) -> Mat + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }

    /// A deterministic gain per step.
    pub fn from_steps(gains: Vec<Mat>) -> Self {
        Self::from_fn(move |k, _, _| gains[k].clone())
    }

    pub fn eval(&self, step: usize, t: f64, w: f64) -> Mat {
        (self.f)(step, t, w)
    }
}

impl fmt::Debug for GainSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GainSchedule")
    }
}

#[derive(Clone, Debug)]
pub enum ControlPolicy {
    Zero,
    OpenLoop(ControlTable),
    /// `u = Theta X + offset`.
    Feedback {
        gain: GainSchedule,
        offset: Option<ControlTable>,
    },
}

/// Trajectories `X(path, k)` and controls `u(path, k)`, path-major.
#[derive(Clone, Debug)]
pub struct StateEnsemble {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub paths: usize,
    x: Vec<f64>,
    u: Vec<f64>,
}

impl StateEnsemble {
    pub fn x(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * (self.steps + 1) + step) * self.n;
        &self.x[i..i + self.n]
    }

    pub fn u(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.steps + step) * self.m;
        &self.u[i..i + self.m]
    }

    pub fn controls(&self) -> ControlTable {
        ControlTable::from_raw(self.steps, self.paths, self.m, self.u.clone())
    }

    /// Writes `path,step,x0..,u0..` rows (controls blank at the final step).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["path".to_string(), "step".to_string()];
        header.extend((0..self.n).map(|i| format!("x{i}")));
        header.extend((0..self.m).map(|i| format!("u{i}")));
        out.write_record(&header)?;
        for p in 0..self.paths {
            for k in 0..=self.steps {
                let mut row = vec![p.to_string(), k.to_string()];
                row.extend(self.x(p, k).iter().map(|v| format!("{v:.17e}")));
                if k < self.steps {
                    row.extend(self.u(p, k).iter().map(|v| format!("{v:.17e}")));
                } else {
                    row.extend((0..self.m).map(|_| String::new()));
                }
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

// Column-major dense kernels on slices; the matrices are tiny.

#[inline]
pub(crate) fn gemv_acc(out: &mut [f64], a: &Mat, x: &[f64], scale: f64) {
    let (rows, cols) = a.shape();
    let data = a.as_slice();
    for j in 0..cols {
        let xj = x[j] * scale;
        if xj != 0.0 {
            let col = &data[j * rows..(j + 1) * rows];
            for i in 0..rows {
                out[i] += col[i] * xj;
            }
        }
    }
}

/// `out += scale * A' x`.
#[inline]
pub(crate) fn gemv_t_acc(out: &mut [f64], a: &Mat, x: &[f64], scale: f64) {
    let (rows, cols) = a.shape();
    let data = a.as_slice();
    for j in 0..cols {
        let col = &data[j * rows..(j + 1) * rows];
        let mut s = 0.0;
        for i in 0..rows {
            s += col[i] * x[i];
        }
        out[j] += scale * s;
    }
}

#[inline]
pub(crate) fn quad_form(a: &Mat, x: &[f64], y: &[f64]) -> f64 {
    // x' A y
    let (rows, cols) = a.shape();
    let data = a.as_slice();
    let mut acc = 0.0;
    for j in 0..cols {
        let col = &data[j * rows..(j + 1) * rows];
        let mut s = 0.0;
        for i in 0..rows {
            s += x[i] * col[i];
        }
        acc += s * y[j];
    }
    acc
}

/// Coefficients per step, shared by all paths when the problem is deterministic.
pub(crate) struct StepCoefficients<'a> {
    problem: &'a LQProblem,
    dt: f64,
    steps: Option<Vec<CoefficientBundle>>,
    terminal: Option<Mat>,
}

impl<'a> StepCoefficients<'a> {
    pub(crate) fn new(problem: &'a LQProblem, steps: usize, dt: f64) -> Self {
        let deterministic = problem.is_deterministic();
        let steps = deterministic.then(|| {
            (0..steps)
                .map(|k| problem.bundle_unchecked(k as f64 * dt, 0.0))
                .collect()
        });
        let terminal = (problem.weights.g.kind() != crate::model::FieldKind::MarkovInBrownian)
            .then(|| problem.terminal(0.0));
        Self {
            problem,
            dt,
            steps,
            terminal,
        }
    }

    pub(crate) fn with<R>(&self, step: usize, w: f64, f: impl FnOnce(&CoefficientBundle) -> R) -> R {
        match &self.steps {
            Some(v) => f(&v[step]),
            None => f(&self.problem.bundle_unchecked(step as f64 * self.dt, w)),
        }
    }

    pub(crate) fn terminal_with<R>(&self, w: f64, f: impl FnOnce(&Mat) -> R) -> R {
        match &self.terminal {
            Some(g) => f(g),
            None => f(&self.problem.terminal(w)),
        }
    }
}

fn check_compat(p: &LQProblem, policy: &ControlPolicy, xi: &Vector, ens: &PathEnsemble) -> Result<()> {
    if xi.len() != p.n() {
        return Err(SlqError::Dimension(format!(
            "initial state has length {} but n = {}",
            xi.len(),
            p.n()
        )));
    }
    if (ens.horizon() - p.horizon).abs() > 1e-9 * p.horizon.max(1.0) {
        return Err(SlqError::Config(format!(
            "ensemble horizon {} differs from problem horizon {}",
            ens.horizon(),
            p.horizon
        )));
    }
    let table_ok = |t: &ControlTable| t.m == p.m() && t.steps == ens.steps() && t.paths == ens.paths();
    let ok = match policy {
        ControlPolicy::Zero => true,
        ControlPolicy::OpenLoop(t) => table_ok(t),
        ControlPolicy::Feedback { offset, .. } => offset.as_ref().is_none_or(table_ok),
    };
    if !ok {
        return Err(SlqError::Dimension("control table does not match problem/ensemble".into()));
    }
    Ok(())
}

/// Simulates one path. Records trajectories when buffers are supplied and
/// returns the discrete cost `<G X_N, X_N> + sum (<QX,X> + 2<SX,u> + <Ru,u>) dt`.
fn run_path(
    coeffs: &StepCoefficients<'_>,
    policy: &ControlPolicy,
    xi: &[f64],
    ens: &PathEnsemble,
    path: usize,
    mut x_out: Option<&mut [f64]>,
    mut u_out: Option<&mut [f64]>,
) -> Result<f64> {
    let n = xi.len();
    let dt = ens.dt();
    let steps = ens.steps();
    let mut x = xi.to_vec();
    let mut next = vec![0.0; n];
    let mut shock = vec![0.0; n];
    let mut running = 0.0;
    if let Some(xs) = x_out.as_deref_mut() {
        xs[..n].copy_from_slice(&x);
    }
    let w = ens.path(path);
    for k in 0..steps {
        let wk = w[k];
        let dw = w[k + 1] - wk;
        let cost = coeffs.with(k, wk, |b| {
            let m = b.b.ncols();
            let mut u = vec![0.0; m];
            match policy {
                ControlPolicy::Zero => {}
                ControlPolicy::OpenLoop(t) => u.copy_from_slice(t.get(path, k)),
                ControlPolicy::Feedback { gain, offset } => {
                    let theta = gain.eval(k, ens.time(k), wk);
                    gemv_acc(&mut u, &theta, &x, 1.0);
                    if let Some(t) = offset {
                        for (ui, oi) in u.iter_mut().zip(t.get(path, k)) {
                            *ui += oi;
                        }
                    }
                }
            }
            let cost = quad_form(&b.q, &x, &x) + 2.0 * quad_form(&b.s, &u, &x) + quad_form(&b.r, &u, &u);
            next.copy_from_slice(&x);
            gemv_acc(&mut next, &b.a, &x, dt);
            gemv_acc(&mut next, &b.b, &u, dt);
            shock.iter_mut().for_each(|s| *s = 0.0);
            gemv_acc(&mut shock, &b.c, &x, 1.0);
            gemv_acc(&mut shock, &b.d, &u, 1.0);
            for i in 0..n {
                next[i] += shock[i] * dw;
            }
            if let Some(us) = u_out.as_deref_mut() {
                us[k * m..(k + 1) * m].copy_from_slice(&u);
            }
            cost
        });
        running += cost * dt;
        std::mem::swap(&mut x, &mut next);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SlqError::Simulation { path, step: k + 1 });
        }
        if let Some(xs) = x_out.as_deref_mut() {
            xs[(k + 1) * n..(k + 2) * n].copy_from_slice(&x);
        }
    }
    let terminal = coeffs.terminal_with(w[steps], |g| quad_form(g, &x, &x));
    Ok(terminal + running)
}

fn first_error(results: Vec<Result<f64>>) -> Result<Vec<f64>> {
    results.into_iter().collect()
}

/// Euler-Maruyama on every path with coefficients at `(t_k, W(t_k))`.
pub fn simulate(
    p: &LQProblem,
    policy: &ControlPolicy,
    xi: &Vector,
    ens: &PathEnsemble,
) -> Result<StateEnsemble> {
    check_compat(p, policy, xi, ens)?;
    let (n, m, steps, paths) = (p.n(), p.m(), ens.steps(), ens.paths());
    let coeffs = StepCoefficients::new(p, steps, ens.dt());
    let mut x = vec![0.0; paths * (steps + 1) * n];
    let mut u = vec![0.0; paths * steps * m];
    let xi = xi.as_slice();
    let results: Vec<Result<f64>> = x
        .par_chunks_mut((steps + 1) * n)
        .zip(u.par_chunks_mut(steps * m))
        .enumerate()
        .map(|(path, (xs, us))| run_path(&coeffs, policy, xi, ens, path, Some(xs), Some(us)))
        .collect();
    first_error(results)?;
    Ok(StateEnsemble {
        n,
        m,
        steps,
        paths,
        x,
        u,
    })
}

/// Per-path discrete costs without storing trajectories.
pub fn simulate_costs(
    p: &LQProblem,
    policy: &ControlPolicy,
    xi: &Vector,
    ens: &PathEnsemble,
) -> Result<Vec<f64>> {
    check_compat(p, policy, xi, ens)?;
    let coeffs = StepCoefficients::new(p, ens.steps(), ens.dt());
    let xi = xi.as_slice();
    let results: Vec<Result<f64>> = (0..ens.paths())
        .into_par_iter()
        .map(|path| run_path(&coeffs, policy, xi, ens, path, None, None))
        .collect();
    first_error(results)
}

/// Per-path discrete costs of recorded trajectories.
pub fn path_costs(p: &LQProblem, ens: &PathEnsemble, se: &StateEnsemble) -> Vec<f64> {
    let coeffs = StepCoefficients::new(p, ens.steps(), ens.dt());
    let dt = ens.dt();
    (0..se.paths)
        .into_par_iter()
        .map(|path| {
            let mut running = 0.0;
            for k in 0..se.steps {
                let (x, u) = (se.x(path, k), se.u(path, k));
                running += coeffs.with(k, ens.w(path, k), |b| {
                    quad_form(&b.q, x, x) + 2.0 * quad_form(&b.s, u, x) + quad_form(&b.r, u, u)
                }) * dt;
            }
            let xn = se.x(path, se.steps);
            running + coeffs.terminal_with(ens.w(path, se.steps), |g| quad_form(g, xn, xn))
        })
        .collect()
}

/// Sample mean and standard error of the discrete cost over paths.
pub fn evaluate_cost(p: &LQProblem, ens: &PathEnsemble, se: &StateEnsemble) -> CostEstimate {
    CostEstimate::from_samples(&path_costs(p, ens, se))
}
