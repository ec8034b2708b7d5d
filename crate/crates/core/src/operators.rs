//! Control-space operators: the quadratic part `N` and linear part `L` of
//! the cost, each applied by one forward and one backward sweep, the
//! control inner product, conjugate gradient on `N u = -L xi`, and a
//! randomised convexity probe.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bsde::{solve_adjoint, BackwardSolution, Projection};
use crate::error::{Result, SlqError};
use crate::lattice::{backward_bsde_tree, cost_to_go, forward_dynamics, TreeModel, TreeProcess};
use crate::model::{LQProblem, Mat, Vector};
use crate::sde::{
    gemv_acc, gemv_t_acc, pairwise_sum, simulate, simulate_costs, ControlPolicy, ControlTable, CostEstimate,
    Measure, PathEnsemble, StateEnsemble, StepCoefficients,
};

/// Where a control lives. Two vectors are compatible iff their layouts are equal.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlLayout {
    /// Node values on levels `0..depth-1` of a tree rooted at `(t0, w0)`.
    Tree { depth: usize, m: usize, dt: f64, t0: f64, w0: f64 },
    /// Per-path per-step values on an ensemble.
    Ensemble { steps: usize, paths: usize, m: usize, dt: f64, measure: Measure },
}

impl ControlLayout {
    pub fn m(&self) -> usize {
        match *self {
            ControlLayout::Tree { m, .. } | ControlLayout::Ensemble { m, .. } => m,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            ControlLayout::Tree { depth, m, .. } => ((1usize << depth) - 1) * m,
            ControlLayout::Ensemble { steps, paths, m, .. } => steps * paths * m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start time of the controls.
    pub fn t0(&self) -> f64 {
        match *self {
            ControlLayout::Tree { t0, .. } => t0,
            ControlLayout::Ensemble { .. } => 0.0,
        }
    }

    /// Measure times `dt` of each stored value, in storage order.
    fn weights(&self) -> Vec<f64> {
        match *self {
            ControlLayout::Tree { depth, m, dt, .. } => {
                let mut w = Vec::with_capacity(self.len());
                for k in 0..depth {
                    let weight = dt / (1u64 << k) as f64;
                    w.extend(std::iter::repeat_n(weight, (1usize << k) * m));
                }
                w
            }
            ControlLayout::Ensemble { paths, dt, .. } => vec![dt / paths as f64; self.len()],
        }
    }
}

/// An adapted control with values stored flat: node-major on a tree,
/// path-major then step-major on an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    pub layout: ControlLayout,
    pub values: Vec<f64>,
}

impl ControlVector {
    pub fn zeros(layout: ControlLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_tree(layout: ControlLayout, process: &TreeProcess<Vector>) -> Self {
        let ControlLayout::Tree { depth, .. } = layout else {
            panic!("tree layout required");
        };
        let mut values = Vec::with_capacity(layout.len());
        for (k, _, v) in process.iter() {
            if k < depth {
                values.extend_from_slice(v.as_slice());
            }
        }
        assert_eq!(values.len(), layout.len(), "process does not cover the layout");
        Self { layout, values }
    }

    pub fn to_tree(&self) -> TreeProcess<Vector> {
        let ControlLayout::Tree { depth, m, .. } = self.layout else {
            panic!("tree layout required");
        };
        TreeProcess::from_fn(depth - 1, |k, j| {
            let i = crate::lattice::node_id(k, j) * m;
            Vector::from_column_slice(&self.values[i..i + m])
        })
    }

    pub fn from_table(layout: ControlLayout, table: &ControlTable) -> Self {
        assert_eq!(table.as_slice().len(), layout.len());
        Self {
            layout,
            values: table.as_slice().to_vec(),
        }
    }

    pub fn to_table(&self) -> ControlTable {
        let ControlLayout::Ensemble { steps, paths, m, .. } = self.layout else {
            panic!("ensemble layout required");
        };
        ControlTable::from_raw(steps, paths, m, self.values.clone())
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ControlVector, b: f64) -> Result<ControlVector> {
        check_layouts(&self.layout, &other.layout)?;
        Ok(Self {
            layout: self.layout.clone(),
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
        })
    }

    pub fn scaled(&self, a: f64) -> ControlVector {
        Self {
            layout: self.layout.clone(),
            values: self.values.iter().map(|x| a * x).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        inner_product(self, self).expect("same layout").max(0.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

fn check_layouts(a: &ControlLayout, b: &ControlLayout) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(SlqError::CarrierMismatch(format!("{a:?} vs {b:?}")))
    }
}

/// `E sum_k <u_k, v_k> dt` under the carrier's measure.
pub fn inner_product(u: &ControlVector, v: &ControlVector) -> Result<f64> {
    check_layouts(&u.layout, &v.layout)?;
    let weights = u.layout.weights();
    let terms: Vec<f64> = u
        .values
        .iter()
        .zip(&v.values)
        .zip(&weights)
        .map(|((a, b), w)| a * b * w)
        .collect();
    Ok(pairwise_sum(&terms))
}

/// The carrier on which operators act.
#[derive(Clone, Debug)]
pub enum OperatorContext {
    /// Exact conditional expectations on a tree.
    Tree(TreeModel),
    /// Ensemble with regression (or tree-enumerated exact) projections.
    Ensemble {
        problem: LQProblem,
        ensemble: PathEnsemble,
        projection: Projection,
    },
}

/// Forward-backward solution along an initial state and a control.
#[derive(Clone, Debug)]
pub enum Fbsde {
    Tree {
        x: TreeProcess<Vector>,
        /// `Y` on levels `0..=N`.
        y: TreeProcess<Vector>,
        /// `E[Y_{k+1} | F_k]` on levels `0..N-1`.
        y_pred: TreeProcess<Vector>,
        z: TreeProcess<Vector>,
    },
    Ensemble {
        states: StateEnsemble,
        adjoint: BackwardSolution,
    },
}

impl Fbsde {
    /// `E[Y(t0)]`.
    pub fn initial_adjoint(&self) -> Vector {
        match self {
            Fbsde::Tree { y, .. } => y.root().clone(),
            Fbsde::Ensemble { adjoint, .. } => adjoint.mean_y(0),
        }
    }
}

impl OperatorContext {
    pub fn tree(model: TreeModel) -> Self {
        Self::Tree(model)
    }

    pub fn ensemble(problem: LQProblem, ensemble: PathEnsemble, projection: Projection) -> Self {
        Self::Ensemble {
            problem,
            ensemble,
            projection,
        }
    }

    pub fn problem(&self) -> &LQProblem {
        match self {
            Self::Tree(model) => model.problem(),
            Self::Ensemble { problem, .. } => problem,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Self::Tree(_))
    }

    pub fn layout(&self) -> ControlLayout {
        let m = self.problem().m();
        match self {
            Self::Tree(model) => {
                let tree = model.tree();
                ControlLayout::Tree {
                    depth: tree.depth(),
                    m,
                    dt: tree.dt(),
                    t0: tree.t0(),
                    w0: tree.w(0, 0),
                }
            }
            Self::Ensemble { ensemble, .. } => ControlLayout::Ensemble {
                steps: ensemble.steps(),
                paths: ensemble.paths(),
                m,
                dt: ensemble.dt(),
                measure: ensemble.measure(),
            },
        }
    }

    /// Carrier description for reports.
    pub fn describe(&self) -> String {
        match self {
            Self::Tree(model) => format!("tree depth {}", model.depth()),
            Self::Ensemble { ensemble, .. } => match ensemble.measure() {
                Measure::MonteCarlo { seed } => {
                    format!("ensemble {} paths x {} steps, seed {seed}", ensemble.paths(), ensemble.steps())
                }
                Measure::TreeEnumeration => format!("tree-enumerated ensemble depth {}", ensemble.steps()),
            },
        }
    }

    fn check_xi(&self, xi: &Vector) -> Result<()> {
        if xi.len() == self.problem().n() {
            Ok(())
        } else {
            Err(SlqError::Dimension(format!(
                "initial state has length {} but n = {}",
                xi.len(),
                self.problem().n()
            )))
        }
    }

    /// Solves the state equation from `xi` under `u` and the adjoint equation
    /// along the resulting pair.
    pub fn solve_fbsde(&self, xi: &Vector, u: &ControlVector) -> Result<Fbsde> {
        self.check_xi(xi)?;
        check_layouts(&self.layout(), &u.layout)?;
        match self {
            Self::Tree(model) => {
                let controls = u.to_tree();
                let x = forward_dynamics(model, &controls, xi);
                let depth = model.depth();
                let leaves = (0..1usize << depth)
                    .map(|j| model.terminal(j) * x.get(depth, j))
                    .collect();
                let (y, z) = backward_bsde_tree(model.tree(), leaves, |k, j, ybar, zk| {
                    let b = model.bundle(k, j);
                    b.a.tr_mul(ybar) + b.c.tr_mul(zk) + &b.q * x.get(k, j) + b.s.tr_mul(controls.get(k, j))
                });
                let y_pred = TreeProcess::from_fn(depth - 1, |k, j| {
                    (y.get(k + 1, 2 * j) + y.get(k + 1, 2 * j + 1)) * 0.5
                });
                Ok(Fbsde::Tree { x, y, y_pred, z })
            }
            Self::Ensemble {
                problem,
                ensemble,
                projection,
            } => {
                let states = simulate(problem, &ControlPolicy::OpenLoop(u.to_table()), xi, ensemble)?;
                let adjoint = solve_adjoint(problem, ensemble, &states, *projection)?;
                Ok(Fbsde::Ensemble { states, adjoint })
            }
        }
    }

    /// `B'Ybar + D'Z + SX + Ru` along a solved pair, with
    /// `Ybar = E[Y_{k+1} | F_k]`. Half the gradient of the discrete cost.
    pub fn stationarity_field(&self, fbsde: &Fbsde, u: &ControlVector) -> Result<ControlVector> {
        check_layouts(&self.layout(), &u.layout)?;
        let m = self.problem().m();
        let mut out = ControlVector::zeros(u.layout.clone());
        match (self, fbsde) {
            (Self::Tree(model), Fbsde::Tree { x, y_pred, z, .. }) => {
                let controls = u.to_tree();
                for (k, j, _) in y_pred.iter() {
                    let b = model.bundle(k, j);
                    let g = b.b.tr_mul(y_pred.get(k, j))
                        + b.d.tr_mul(z.get(k, j))
                        + &b.s * x.get(k, j)
                        + &b.r * controls.get(k, j);
                    let i = crate::lattice::node_id(k, j) * m;
                    out.values[i..i + m].copy_from_slice(g.as_slice());
                }
            }
            (
                Self::Ensemble {
                    problem, ensemble, ..
                },
                Fbsde::Ensemble { states, adjoint },
            ) => {
                let steps = ensemble.steps();
                let coeffs = StepCoefficients::new(problem, steps, ensemble.dt());
                for path in 0..ensemble.paths() {
                    for k in 0..steps {
                        let i = (path * steps + k) * m;
                        let g = &mut out.values[i..i + m];
                        coeffs.with(k, ensemble.w(path, k), |b| {
                            gemv_t_acc(g, &b.b, adjoint.y_pred(path, k), 1.0);
                            gemv_t_acc(g, &b.d, adjoint.z(path, k), 1.0);
                            gemv_acc(g, &b.s, states.x(path, k), 1.0);
                            gemv_acc(g, &b.r, states.u(path, k), 1.0);
                        });
                    }
                }
            }
            _ => return Err(SlqError::CarrierMismatch("solution from another carrier".into())),
        }
        Ok(out)
    }

    /// Stationarity field along `(xi, u)`.
    pub fn gradient(&self, xi: &Vector, u: &ControlVector) -> Result<ControlVector> {
        let fbsde = self.solve_fbsde(xi, u)?;
        self.stationarity_field(&fbsde, u)
    }

    /// Discrete cost `J(t0, xi; u)`; on ensembles the path mean and its
    /// standard error.
    pub fn cost(&self, xi: &Vector, u: &ControlVector) -> Result<CostEstimate> {
        self.check_xi(xi)?;
        check_layouts(&self.layout(), &u.layout)?;
        match self {
            Self::Tree(model) => {
                let controls = u.to_tree();
                let states = forward_dynamics(model, &controls, xi);
                Ok(CostEstimate {
                    mean: *cost_to_go(model, &states, &controls).root(),
                    stderr: 0.0,
                })
            }
            Self::Ensemble {
                problem, ensemble, ..
            } => {
                let costs = simulate_costs(problem, &ControlPolicy::OpenLoop(u.to_table()), xi, ensemble)?;
                Ok(CostEstimate::from_samples(&costs))
            }
        }
    }

    /// Per-path costs on an ensemble carrier (for common-random-number differences).
    pub fn path_costs(&self, xi: &Vector, policy: &ControlPolicy) -> Result<Vec<f64>> {
        match self {
            Self::Ensemble {
                problem, ensemble, ..
            } => simulate_costs(problem, policy, xi, ensemble),
            Self::Tree(_) => Err(SlqError::Config("path costs need an ensemble carrier".into())),
        }
    }
}

/// Quadratic part of the cost: the stationarity field from zero initial
/// state, so that `[[N u, u]] = J(t0, 0; u)`.
pub fn apply_n(ctx: &OperatorContext, u: &ControlVector) -> Result<ControlVector> {
    ctx.gradient(&Vector::zeros(ctx.problem().n()), u)
}

/// Linear part of the cost: the stationarity field of the uncontrolled
/// solution from `xi`, without the `Ru` term (which vanishes at `u = 0`).
pub fn apply_l(ctx: &OperatorContext, xi: &Vector) -> Result<ControlVector> {
    ctx.gradient(xi, &ControlVector::zeros(ctx.layout()))
}

/// One conjugate-gradient iteration record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgStep {
    pub iteration: usize,
    /// `[[r, r]]^{1/2}` after the step.
    pub residual: f64,
    /// `[[d, N d]] / [[d, d]]` of the search direction.
    pub curvature: f64,
    /// `1/2 [[N u, u]] + [[L xi, u]]` after the step.
    pub energy: f64,
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub control: ControlVector,
    pub iterations: usize,
    /// `[[N u + L xi, N u + L xi]]^{1/2}`, recomputed from scratch.
    pub residual: f64,
    /// `[[L xi, L xi]]^{1/2}`.
    pub rhs_norm: f64,
    pub trace: Vec<CgStep>,
}

impl CgSolution {
    /// Whether the tracked energy never increased (beyond rounding).
    pub fn energy_monotone(&self) -> bool {
        self.trace
            .windows(2)
            .all(|w| w[1].energy <= w[0].energy + 1e-12 * w[0].energy.abs().max(1.0))
    }

    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["iteration", "residual", "curvature", "energy"])?;
        for s in &self.trace {
            out.write_record(&[
                s.iteration.to_string(),
                format!("{:.17e}", s.residual),
                format!("{:.17e}", s.curvature),
                format!("{:.17e}", s.energy),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Conjugate gradient for `N u = -L xi` in the control inner product.
/// Stops when `[[r, r]]^{1/2} <= tol * [[L xi, L xi]]^{1/2}`; any search
/// direction with `[[d, N d]] <= 0` aborts with `NotUniformlyConvex`.
pub fn solve_open_loop_cg(ctx: &OperatorContext, xi: &Vector, tol: f64, max_iter: usize) -> Result<CgSolution> {
    if !ctx.is_exact() {
        return Err(SlqError::Config(
            "conjugate gradient runs on the tree carrier only".into(),
        ));
    }
    let lxi = apply_l(ctx, xi)?;
    let rhs_norm = lxi.norm();
    let mut u = ControlVector::zeros(ctx.layout());
    if rhs_norm == 0.0 {
        return Ok(CgSolution {
            control: u,
            iterations: 0,
            residual: 0.0,
            rhs_norm,
            trace: Vec::new(),
        });
    }
    let mut r = lxi.scaled(-1.0);
    let mut d = r.clone();
    let mut rr = inner_product(&r, &r)?;
    let mut energy = 0.0;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while rr.sqrt() > tol * rhs_norm {
        if iterations == max_iter {
            return Err(SlqError::CgNotConverged {
                iterations,
                residual: rr.sqrt() / rhs_norm,
            });
        }
        iterations += 1;
        let nd = apply_n(ctx, &d)?;
        let dnd = inner_product(&d, &nd)?;
        let dd = inner_product(&d, &d)?;
        let curvature = dnd / dd;
        if dnd <= 0.0 || !curvature.is_finite() {
            return Err(SlqError::NotUniformlyConvex {
                iteration: iterations,
                curvature,
            });
        }
        let alpha = rr / dnd;
        u = u.combine(1.0, &d, alpha)?;
        r = r.combine(1.0, &nd, -alpha)?;
        energy -= 0.5 * alpha * rr;
        let rr_next = inner_product(&r, &r)?;
        trace.push(CgStep {
            iteration: iterations,
            residual: rr_next.sqrt(),
            curvature,
            energy,
        });
        d = r.combine(1.0, &d, rr_next / rr)?;
        rr = rr_next;
    }
    let true_residual = apply_n(ctx, &u)?.combine(1.0, &lxi, 1.0)?.norm();
    Ok(CgSolution {
        control: u,
        iterations,
        residual: true_residual,
        rhs_norm,
        trace,
    })
}

/// Smallest sampled Rayleigh quotient `[[N u, u]] / [[u, u]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexityCertificate {
    pub delta: f64,
    pub samples: usize,
    pub t0: f64,
    /// Index of the sample attaining `delta`.
    pub argmin: usize,
}

impl ConvexityCertificate {
    /// A negative quotient exhibits a direction of descent below zero.
    pub fn refutes_convexity(&self) -> bool {
        self.delta < 0.0
    }
}

/// Every tenth sample is a smooth low-frequency function of `(t, w)`; the
/// rest are white. Ensemble samples are functions of `(t_k, W(t_k))` so that
/// they stay adapted.
fn random_control(ctx: &OperatorContext, smooth: bool, rng: &mut ChaCha8Rng) -> ControlVector {
    let layout = ctx.layout();
    let m = layout.m();
    let horizon = ctx.problem().horizon;
    let mut u = ControlVector::zeros(layout.clone());
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let smooth_fn = |rng: &mut ChaCha8Rng| {
        let c: Vec<[f64; 4]> = (0..m)
            .map(|_| [normal(rng), normal(rng), normal(rng), normal(rng)])
            .collect();
        move |t: f64, w: f64, i: usize| {
            let s = t / horizon;
            c[i][0] + c[i][1] * (PI * s).cos() + c[i][2] * w + c[i][3] * (w * (2.0 * PI * s).sin()).tanh()
        }
    };
    match (&layout, ctx) {
        (ControlLayout::Tree { depth, dt, t0, .. }, OperatorContext::Tree(model)) => {
            let f = smooth.then(|| smooth_fn(rng));
            for k in 0..*depth {
                for j in 0..1usize << k {
                    let base = crate::lattice::node_id(k, j) * m;
                    for i in 0..m {
                        u.values[base + i] = match &f {
                            Some(f) => f(t0 + k as f64 * dt, model.tree().w(k, j), i),
                            None => normal(rng),
                        };
                    }
                }
            }
        }
        (ControlLayout::Ensemble { steps, paths, dt, .. }, OperatorContext::Ensemble { ensemble, .. }) => {
            if smooth {
                let f = smooth_fn(rng);
                for p in 0..*paths {
                    for k in 0..*steps {
                        for i in 0..m {
                            u.values[(p * steps + k) * m + i] = f(k as f64 * dt, ensemble.w(p, k), i);
                        }
                    }
                }
            } else {
                // Independent random cubic in W(t_k) per step and component.
                let coeffs: Vec<[f64; 4]> = (0..steps * m)
                    .map(|_| [normal(rng), normal(rng), normal(rng), normal(rng)])
                    .collect();
                for p in 0..*paths {
                    for k in 0..*steps {
                        let w = ensemble.w(p, k) / (dt * (k.max(1)) as f64).sqrt();
                        for i in 0..m {
                            let c = &coeffs[k * m + i];
                            u.values[(p * steps + k) * m + i] =
                                c[0] + c[1] * w + c[2] * (w * w - 1.0) / 2f64.sqrt() + c[3] * w.sin();
                        }
                    }
                }
            }
        }
        _ => unreachable!("layout comes from the context"),
    }
    let norm = u.norm();
    if norm > 0.0 {
        u.scaled(1.0 / norm)
    } else {
        u
    }
}

/// Samples normalised random adapted controls and returns the smallest
/// Rayleigh quotient of `N`.
pub fn convexity_probe(ctx: &OperatorContext, n_samples: usize, seed: u64) -> Result<ConvexityCertificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = f64::INFINITY;
    let mut argmin = 0;
    for s in 0..n_samples {
        let u = random_control(ctx, s % 10 == 9, &mut rng);
        let uu = inner_product(&u, &u)?;
        if uu == 0.0 {
            continue;
        }
        let q = inner_product(&apply_n(ctx, &u)?, &u)? / uu;
        if q < delta {
            delta = q;
            argmin = s;
        }
    }
    Ok(ConvexityCertificate {
        delta,
        samples: n_samples,
        t0: ctx.layout().t0(),
        argmin,
    })
}

/// A random adapted control of unit norm (white when `smooth` is false).
pub fn random_unit_control(ctx: &OperatorContext, smooth: bool, rng: &mut ChaCha8Rng) -> ControlVector {
    random_control(ctx, smooth, rng)
}

/// Matrix `[[L e_i, L e_j]]`; its largest eigenvalue bounds `[[L xi, L xi]] / |xi|^2`.
pub fn l_gram(ctx: &OperatorContext) -> Result<Mat> {
    let n = ctx.problem().n();
    let images: Vec<ControlVector> = (0..n)
        .map(|i| {
            let mut e = Vector::zeros(n);
            e[i] = 1.0;
            apply_l(ctx, &e)
        })
        .collect::<Result<_>>()?;
    let mut g = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = inner_product(&images[i], &images[j])?;
        }
    }
    Ok(g)
}
