//! Exact discrete-time world: a non-recombining Bernoulli tree with
//! `dW = +-sqrt(dt)` at probability 1/2 each.
//!
//! Node `(k, j)` sits at level `k` with `j < 2^k`. Its children are
//! `(k + 1, 2j)` (up move) and `(k + 1, 2j + 1)` (down move), so bit
//! `k - 1 - i` of `j` records the direction of step `i`. Conditional
//! expectations, martingale increments and dynamic programming are exact up
//! to rounding.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Result, SlqError};
use crate::linalg::{solve_psd, SolveFailure};
use crate::model::{CoefficientBundle, LQProblem, Mat, Vector};

pub const MAX_DEPTH: usize = 24;
const PAR_THRESHOLD: usize = 2048;

#[inline]
pub fn node_id(level: usize, index: usize) -> usize {
    (1usize << level) - 1 + index
}

/// Evaluates `f` over `0..len`, in parallel for wide levels. Output order is
/// always index order.
pub(crate) fn map_level<T: Send>(len: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if len >= PAR_THRESHOLD {
        (0..len).into_par_iter().map(f).collect()
    } else {
        (0..len).map(f).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliTree {
    depth: usize,
    dt: f64,
    sqrt_dt: f64,
    t0: f64,
    w0: f64,
}

impl BernoulliTree {
    /// Tree with `depth` steps over `[0, horizon]`.
    pub fn build(depth: usize, horizon: f64) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(SlqError::TreeSize { depth });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SlqError::Config(format!("horizon must be positive, got {horizon}")));
        }
        let dt = horizon / depth as f64;
        Ok(Self {
            depth,
            dt,
            sqrt_dt: dt.sqrt(),
            t0: 0.0,
            w0: 0.0,
        })
    }

    /// The subtree rooted at `(level, index)`, re-indexed from its own root.
    pub fn subtree(&self, level: usize, index: usize) -> Result<Self> {
        if level >= self.depth || index >= 1 << level {
            return Err(SlqError::TreeSize { depth: self.depth - level.min(self.depth) });
        }
        Ok(Self {
            depth: self.depth - level,
            dt: self.dt,
            sqrt_dt: self.sqrt_dt,
            t0: self.time(level),
            w0: self.w(level, index),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    /// Time of the root.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time(&self, level: usize) -> f64 {
        self.t0 + level as f64 * self.dt
    }

    pub fn node_count(&self) -> usize {
        (1usize << (self.depth + 1)) - 1
    }

    pub fn level_width(level: usize) -> usize {
        1 << level
    }

    /// Brownian value at node `(level, index)`.
    pub fn w(&self, level: usize, index: usize) -> f64 {
        let downs = index.count_ones() as f64;
        self.w0 + self.sqrt_dt * (level as f64 - 2.0 * downs)
    }

    /// Brownian increment on the edge from `(level, index)` to its child.
    pub fn increment(&self, up: bool) -> f64 {
        if up {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }
}

/// Values stored on nodes. `mean` and `integrand` implement the two exact
/// projections used by every backward scheme.
pub trait NodeValue: Clone + Send + Sync {
    /// `(a + b) / 2`.
    fn mean(a: &Self, b: &Self) -> Self;
    /// `(a - b) * s`.
    fn diff_scaled(a: &Self, b: &Self, s: f64) -> Self;
    /// `self + other * s`.
    fn add_scaled(&self, other: &Self, s: f64) -> Self;
    /// Row-major flattening for export.
    fn flatten(&self) -> Vec<f64>;
}

impl NodeValue for f64 {
    fn mean(a: &Self, b: &Self) -> Self {
        0.5 * (a + b)
    }
    fn diff_scaled(a: &Self, b: &Self, s: f64) -> Self {
        (a - b) * s
    }
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }
    fn flatten(&self) -> Vec<f64> {
        vec![*self]
    }
}

impl NodeValue for Vector {
    fn mean(a: &Self, b: &Self) -> Self {
        (a + b) * 0.5
    }
    fn diff_scaled(a: &Self, b: &Self, s: f64) -> Self {
        (a - b) * s
    }
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }
    fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }
}

impl NodeValue for Mat {
    fn mean(a: &Self, b: &Self) -> Self {
        (a + b) * 0.5
    }
    fn diff_scaled(a: &Self, b: &Self, s: f64) -> Self {
        (a - b) * s
    }
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }
    fn flatten(&self) -> Vec<f64> {
        self.transpose().iter().copied().collect()
    }
}

/// Per-node values on levels `0..=last_level`, stored flat by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeProcess<T> {
    values: Vec<T>,
    last_level: usize,
}

impl<T> TreeProcess<T> {
    pub fn from_fn(last_level: usize, f: impl Fn(usize, usize) -> T + Sync + Send) -> Self
    where
        T: Send,
    {
        let mut values = Vec::with_capacity((1 << (last_level + 1)) - 1);
        for k in 0..=last_level {
            values.extend(map_level(1 << k, |j| f(k, j)));
        }
        Self { values, last_level }
    }

    /// Builds a process from per-level vectors; level `k` must have `2^k` entries.
    pub fn from_levels(levels: Vec<Vec<T>>) -> Self {
        assert!(!levels.is_empty(), "a tree process needs at least the root level");
        let last_level = levels.len() - 1;
        let mut values = Vec::with_capacity((1 << (last_level + 1)) - 1);
        for (k, level) in levels.into_iter().enumerate() {
            assert_eq!(level.len(), 1 << k, "level {k} has the wrong width");
            values.extend(level);
        }
        Self { values, last_level }
    }

    pub fn last_level(&self) -> usize {
        self.last_level
    }

    pub fn get(&self, level: usize, index: usize) -> &T {
        debug_assert!(level <= self.last_level && index < 1 << level);
        &self.values[node_id(level, index)]
    }

    pub fn get_mut(&mut self, level: usize, index: usize) -> &mut T {
        &mut self.values[node_id(level, index)]
    }

    pub fn level(&self, level: usize) -> &[T] {
        &self.values[node_id(level, 0)..node_id(level + 1, 0)]
    }

    pub fn root(&self) -> &T {
        &self.values[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        (0..=self.last_level)
            .flat_map(move |k| (0..1usize << k).map(move |j| (k, j, &self.values[node_id(k, j)])))
    }

    pub fn map<U: Send>(&self, f: impl Fn(usize, usize, &T) -> U + Sync + Send) -> TreeProcess<U>
    where
        T: Sync,
    {
        TreeProcess::from_fn(self.last_level, |k, j| f(k, j, self.get(k, j)))
    }
}

/// `E[V_{k+1} | node (k, j)]`: the average of the two children.
pub fn cond_expect<T: NodeValue>(proc: &TreeProcess<T>, level: usize, index: usize) -> T {
    T::mean(proc.get(level + 1, 2 * index), proc.get(level + 1, 2 * index + 1))
}

/// `E[V_{k+1} dW_k | node] / dt`: the martingale-increment projection.
pub fn martingale_integrand<T: NodeValue>(
    tree: &BernoulliTree,
    proc: &TreeProcess<T>,
    level: usize,
    index: usize,
) -> T {
    T::diff_scaled(
        proc.get(level + 1, 2 * index),
        proc.get(level + 1, 2 * index + 1),
        0.5 / tree.sqrt_dt(),
    )
}

/// Expectation of a level under the tree measure (equal node weights).
pub fn level_mean(values: &[f64]) -> f64 {
    crate::sde::pairwise_sum(values) / values.len() as f64
}

#[derive(Clone, Debug)]
enum NodeData<T> {
    PerLevel(Vec<T>),
    PerNode(Vec<T>),
}

impl<T> NodeData<T> {
    fn get(&self, level: usize, index: usize) -> &T {
        match self {
            NodeData::PerLevel(v) => &v[level],
            NodeData::PerNode(v) => &v[node_id(level, index)],
        }
    }
}

/// A tree together with the problem's coefficients cached on its nodes.
/// Deterministic problems store one bundle per level.
#[derive(Clone, Debug)]
pub struct TreeModel {
    tree: BernoulliTree,
    problem: LQProblem,
    bundles: NodeData<CoefficientBundle>,
    terminal: NodeData<Mat>,
}

impl TreeModel {
    pub fn new(tree: BernoulliTree, problem: &LQProblem) -> Result<Self> {
        let end = tree.time(tree.depth());
        if (end - problem.horizon).abs() > 1e-9 * problem.horizon.max(1.0) {
            return Err(SlqError::Config(format!(
                "tree ends at t = {end} but the problem horizon is {}",
                problem.horizon
            )));
        }
        problem.eval_all(tree.t0(), 0.0)?;
        let n_levels = tree.depth();
        let bundles = if problem.is_deterministic() {
            NodeData::PerLevel(
                (0..n_levels)
                    .map(|k| problem.bundle_unchecked(tree.time(k), 0.0))
                    .collect(),
            )
        } else {
            let mut v = Vec::with_capacity((1 << n_levels) - 1);
            for k in 0..n_levels {
                let t = tree.time(k);
                v.extend(map_level(1 << k, |j| problem.bundle_unchecked(t, tree.w(k, j))));
            }
            NodeData::PerNode(v)
        };
        let terminal = if problem.weights.g.kind() == crate::model::FieldKind::MarkovInBrownian {
            let n = tree.depth();
            NodeData::PerNode(map_level(1 << n, |j| problem.terminal(tree.w(n, j))))
        } else {
            NodeData::PerLevel(vec![problem.terminal(0.0)])
        };
        Ok(Self {
            tree,
            problem: problem.clone(),
            bundles,
            terminal,
        })
    }

    /// Convenience: build the tree and the model in one step.
    pub fn build(depth: usize, problem: &LQProblem) -> Result<Self> {
        Self::new(BernoulliTree::build(depth, problem.horizon)?, problem)
    }

    pub fn tree(&self) -> &BernoulliTree {
        &self.tree
    }

    pub fn problem(&self) -> &LQProblem {
        &self.problem
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn dt(&self) -> f64 {
        self.tree.dt()
    }

    pub fn bundle(&self, level: usize, index: usize) -> &CoefficientBundle {
        debug_assert!(level < self.depth());
        self.bundles.get(level, index)
    }

    /// `G` at leaf `index`.
    pub fn terminal(&self, index: usize) -> &Mat {
        match &self.terminal {
            NodeData::PerLevel(v) => &v[0],
            NodeData::PerNode(v) => &v[index],
        }
    }

    /// The model restricted to the subtree rooted at `(level, index)`.
    pub fn subtree(&self, level: usize, index: usize) -> Result<Self> {
        TreeModel::new(self.tree.subtree(level, index)?, &self.problem)
    }
}

/// Control process on levels `0..N-1` that is identically zero.
pub fn zero_controls(model: &TreeModel) -> TreeProcess<Vector> {
    let m = model.problem().m();
    TreeProcess::from_fn(model.depth() - 1, |_, _| Vector::zeros(m))
}

/// Euler step of the state equation along both branches of every node:
/// `X_{k+1} = X_k + (A X_k + B u_k) dt + (C X_k + D u_k) dW`.
pub fn forward_dynamics(
    model: &TreeModel,
    controls: &TreeProcess<Vector>,
    xi: &Vector,
) -> TreeProcess<Vector> {
    let n_steps = model.depth();
    assert!(controls.last_level() + 1 >= n_steps, "controls must cover levels 0..N-1");
    let dt = model.dt();
    let mut levels: Vec<Vec<Vector>> = Vec::with_capacity(n_steps + 1);
    levels.push(vec![xi.clone()]);
    for k in 0..n_steps {
        let prev = &levels[k];
        let next = map_level(1 << (k + 1), |child| {
            let j = child / 2;
            let dw = model.tree().increment(child % 2 == 0);
            let b = model.bundle(k, j);
            let x = &prev[j];
            let u = controls.get(k, j);
            let drift = &b.a * x + &b.b * u;
            let diffusion = &b.c * x + &b.d * u;
            x + drift * dt + diffusion * dw
        });
        levels.push(next);
    }
    TreeProcess::from_levels(levels)
}

/// Backward scheme `Z_k = E[Y_{k+1} dW | node] / dt`,
/// `Y_k = E[Y_{k+1} | node] + f(k, j, E[Y_{k+1} | node], Z_k) dt`.
///
/// Returns `(Y, Z)` with `Y` on levels `0..=N` and `Z` on `0..N-1`.
pub fn backward_bsde_tree<T: NodeValue>(
    tree: &BernoulliTree,
    terminal: Vec<T>,
    driver: impl Fn(usize, usize, &T, &T) -> T + Sync + Send,
) -> (TreeProcess<T>, TreeProcess<T>) {
    let n = tree.depth();
    assert_eq!(terminal.len(), 1 << n, "terminal values must cover the leaves");
    let dt = tree.dt();
    let scale = 0.5 / tree.sqrt_dt();
    let mut y_levels: Vec<Vec<T>> = vec![Vec::new(); n + 1];
    let mut z_levels: Vec<Vec<T>> = vec![Vec::new(); n];
    y_levels[n] = terminal;
    for k in (0..n).rev() {
        let next = &y_levels[k + 1];
        let pairs: Vec<(T, T)> = map_level(1 << k, |j| {
            let (up, down) = (&next[2 * j], &next[2 * j + 1]);
            let y_bar = T::mean(up, down);
            let z = T::diff_scaled(up, down, scale);
            let f = driver(k, j, &y_bar, &z);
            (y_bar.add_scaled(&f, dt), z)
        });
        let (y, z): (Vec<T>, Vec<T>) = pairs.into_iter().unzip();
        y_levels[k] = y;
        z_levels[k] = z;
    }
    (TreeProcess::from_levels(y_levels), TreeProcess::from_levels(z_levels))
}

/// Output of [`dp_solve`].
#[derive(Clone, Debug)]
pub struct DpSolution {
    /// Cost-to-go kernel on levels `0..=N`.
    pub p: TreeProcess<Mat>,
    /// Optimal feedback gain on levels `0..N-1`.
    pub gain: TreeProcess<Mat>,
    /// Smallest eigenvalue of the nodewise control Hessian divided by `dt`.
    pub min_hessian_eig: f64,
}

impl DpSolution {
    /// `xi' P(root) xi`.
    pub fn value(&self, xi: &Vector) -> f64 {
        xi.dot(&(self.p.root() * xi))
    }
}

struct NodeQuadratic {
    kxx: Mat,
    kux: Mat,
    kuu: Mat,
}

/// One-step quadratic `E[<P' X', X'> | node] + (<QX,X> + 2<SX,u> + <Ru,u>) dt`
/// written as `[X; u]' [[Kxx, Kux'], [Kux, Kuu]] [X; u]`.
fn node_quadratic(
    b: &CoefficientBundle,
    p_up: &Mat,
    p_down: &Mat,
    dt: f64,
    sqrt_dt: f64,
) -> NodeQuadratic {
    let n = b.a.nrows();
    let eye = Mat::identity(n, n);
    let drift_x = &eye + &b.a * dt;
    let drift_u = &b.b * dt;
    let shock_x = &b.c * sqrt_dt;
    let shock_u = &b.d * sqrt_dt;
    let fu = &drift_x + &shock_x;
    let fd = &drift_x - &shock_x;
    let hu = &drift_u + &shock_u;
    let hd = &drift_u - &shock_u;
    let kxx = (fu.transpose() * p_up * &fu + fd.transpose() * p_down * &fd) * 0.5 + &b.q * dt;
    let kux = (hu.transpose() * p_up * &fu + hd.transpose() * p_down * &fd) * 0.5 + &b.s * dt;
    let kuu = (hu.transpose() * p_up * &hu + hd.transpose() * p_down * &hd) * 0.5 + &b.r * dt;
    NodeQuadratic { kxx, kux, kuu }
}

/// Exact backward dynamic programming on the tree.
///
/// At every node the one-step quadratic is minimized over `u` by completing
/// the square: `Theta = -Kuu^{-1} Kux`, `P = Kxx - Kux' Kuu^{-1} Kux`.
pub fn dp_solve(model: &TreeModel) -> Result<DpSolution> {
    let tree = model.tree();
    let n = model.depth();
    let dt = tree.dt();
    let sqrt_dt = tree.sqrt_dt();
    let mut p_levels: Vec<Vec<Mat>> = vec![Vec::new(); n + 1];
    let mut gain_levels: Vec<Vec<Mat>> = vec![Vec::new(); n];
    p_levels[n] = (0..1usize << n).map(|j| model.terminal(j).clone()).collect();
    let mut min_eig = f64::INFINITY;
    for k in (0..n).rev() {
        let next = &p_levels[k + 1];
        let results: Vec<Result<(Mat, Mat, f64)>> = map_level(1 << k, |j| {
            let b = model.bundle(k, j);
            let quad = node_quadratic(b, &next[2 * j], &next[2 * j + 1], dt, sqrt_dt);
            let solved = solve_psd(&quad.kuu, &quad.kux, true).map_err(|failure| {
                let min_eig = match failure {
                    SolveFailure::Indefinite { min_eig } | SolveFailure::Singular { min_eig, .. } => min_eig,
                };
                SlqError::IndefiniteHessian {
                    level: k,
                    index: j,
                    min_eigenvalue: min_eig / dt,
                }
            })?;
            let eig = solved.min_eig / dt;
            let gain = -solved.solution;
            let p = crate::model::symmetrize(&(&quad.kxx + quad.kux.transpose() * &gain));
            Ok((p, gain, eig))
        });
        let mut p_level = Vec::with_capacity(results.len());
        let mut g_level = Vec::with_capacity(results.len());
        for r in results {
            let (p, g, e) = r?;
            min_eig = min_eig.min(e);
            p_level.push(p);
            g_level.push(g);
        }
        p_levels[k] = p_level;
        gain_levels[k] = g_level;
    }
    Ok(DpSolution {
        p: TreeProcess::from_levels(p_levels),
        gain: TreeProcess::from_levels(gain_levels),
        min_hessian_eig: min_eig,
    })
}

/// Running cost `(<QX,X> + 2<SX,u> + <Ru,u>)` at a node, before the `dt` factor.
pub fn running_cost(b: &CoefficientBundle, x: &Vector, u: &Vector) -> f64 {
    x.dot(&(&b.q * x)) + 2.0 * u.dot(&(&b.s * x)) + u.dot(&(&b.r * u))
}

/// Conditional cost-to-go `E[sum_{i>=k} running_i dt + <G X_N, X_N> | node]`
/// of a state/control pair.
pub fn cost_to_go(
    model: &TreeModel,
    states: &TreeProcess<Vector>,
    controls: &TreeProcess<Vector>,
) -> TreeProcess<f64> {
    let n = model.depth();
    let terminal: Vec<f64> = (0..1usize << n)
        .map(|j| {
            let x = states.get(n, j);
            x.dot(&(model.terminal(j) * x))
        })
        .collect();
    let (y, _) = backward_bsde_tree(model.tree(), terminal, |k, j, _, _| {
        running_cost(model.bundle(k, j), states.get(k, j), controls.get(k, j))
    });
    y
}

/// Discrete cost `J(t0, xi; u)` on the tree.
pub fn discrete_cost(model: &TreeModel, xi: &Vector, controls: &TreeProcess<Vector>) -> f64 {
    let states = forward_dynamics(model, controls, xi);
    *cost_to_go(model, &states, controls).root()
}

/// Closed-loop state and control under `u = Theta X`.
pub fn closed_loop(
    model: &TreeModel,
    gain: &TreeProcess<Mat>,
    xi: &Vector,
) -> (TreeProcess<Vector>, TreeProcess<Vector>) {
    let n_steps = model.depth();
    let dt = model.dt();
    let mut x_levels: Vec<Vec<Vector>> = vec![vec![xi.clone()]];
    let mut u_levels: Vec<Vec<Vector>> = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let xs = &x_levels[k];
        let us: Vec<Vector> = map_level(1 << k, |j| gain.get(k, j) * &xs[j]);
        let next = map_level(1 << (k + 1), |child| {
            let j = child / 2;
            let dw = model.tree().increment(child % 2 == 0);
            let b = model.bundle(k, j);
            let (x, u) = (&xs[j], &us[j]);
            x + (&b.a * x + &b.b * u) * dt + (&b.c * x + &b.d * u) * dw
        });
        u_levels.push(us);
        x_levels.push(next);
    }
    (TreeProcess::from_levels(x_levels), TreeProcess::from_levels(u_levels))
}

/// Writes `level,index,w,v0,v1,...` rows, values flattened row-major.
pub fn write_tree_csv<T: NodeValue, W: Write>(
    tree: &BernoulliTree,
    proc: &TreeProcess<T>,
    writer: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let width = proc.root().flatten().len();
    let mut header = vec!["level".to_string(), "index".to_string(), "w".to_string()];
    header.extend((0..width).map(|i| format!("v{i}")));
    out.write_record(&header)?;
    for (k, j, v) in proc.iter() {
        let mut row = vec![k.to_string(), j.to_string(), format!("{:.17e}", tree.w(k, j))];
        row.extend(v.flatten().iter().map(|x| format!("{x:.17e}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
