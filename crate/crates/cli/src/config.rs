//! Experiment configuration: a TOML file with a problem, a carrier and one
//! table per command. Every field has a default; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use slq_core::fixtures;
use slq_core::verify::{CheckKind, EnsembleSuiteOptions, SuiteControl, TreeSuiteOptions};
use slq_core::{
    validate_problem, CoefficientField, Dimensions, LQProblem, Mat, MatrixFn, SlqError, Vector, WeightField,
};

pub type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: Option<PathBuf>,
    /// Overrides every seed below when set.
    pub seed: Option<u64>,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
    pub problem: ProblemSpec,
    pub carrier: CarrierSpec,
    pub solve: SolveSpec,
    pub verify: VerifySpec,
    pub compare: CompareSpec,
    pub sweep: SweepSpec,
    /// Written into manifests; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<ArtifactInfo>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactInfo {
    pub name: String,
    pub version: String,
    pub command: String,
}

/// A named built-in, or inline fields. Missing inline fields are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub builtin: Option<String>,
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub coefficient_bound: f64,
    pub weight_bound: f64,
    pub a: Option<FieldSpec>,
    pub b: Option<FieldSpec>,
    pub c: Option<FieldSpec>,
    pub d: Option<FieldSpec>,
    pub q: Option<FieldSpec>,
    pub s: Option<FieldSpec>,
    pub r: Option<FieldSpec>,
    pub g: Option<FieldSpec>,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            builtin: None,
            name: "inline".into(),
            n: 0,
            m: 0,
            horizon: 1.0,
            coefficient_bound: 1.0,
            weight_bound: 1.0,
            a: None,
            b: None,
            c: None,
            d: None,
            q: None,
            s: None,
            r: None,
            g: None,
        }
    }
}

/// A matrix field as a function of `(t, w)`. Matrices are lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `value`.
    Constant { value: Matrix },
    /// `sum_i coeffs[i] t^i`.
    PolyT { coeffs: Vec<Matrix> },
    /// `base + amplitude sin(frequency w)`.
    SinW {
        base: Matrix,
        amplitude: Matrix,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// `base + amplitude cos(frequency w)`.
    CosW {
        base: Matrix,
        amplitude: Matrix,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// `base + slope w`.
    AffineW { base: Matrix, slope: Matrix },
    /// `base + amplitude tanh(w)`.
    TanhW { base: Matrix, amplitude: Matrix },
}

fn one() -> f64 {
    1.0
}

fn to_mat(rows: &Matrix, field: &str) -> Result<Mat, SlqError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(SlqError::Config(format!("{field}: matrix rows must be non-empty and of equal length")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn same_shape(mats: &[&Mat], field: &str) -> Result<(), SlqError> {
    if mats.windows(2).all(|w| w[0].shape() == w[1].shape()) {
        Ok(())
    } else {
        Err(SlqError::Config(format!("{field}: matrices of one field must share a shape")))
    }
}

impl FieldSpec {
    pub fn build(&self, field: &str) -> Result<MatrixFn, SlqError> {
        let pair = |base: &Matrix, other: &Matrix| -> Result<(Mat, Mat), SlqError> {
            let (b, o) = (to_mat(base, field)?, to_mat(other, field)?);
            same_shape(&[&b, &o], field)?;
            Ok((b, o))
        };
        Ok(match self {
            FieldSpec::Constant { value } => MatrixFn::constant(to_mat(value, field)?),
            FieldSpec::PolyT { coeffs } => {
                let mats = coeffs.iter().map(|c| to_mat(c, field)).collect::<Result<Vec<_>, _>>()?;
                if mats.is_empty() {
                    return Err(SlqError::Config(format!("{field}: poly-t needs at least one coefficient")));
                }
                same_shape(&mats.iter().collect::<Vec<_>>(), field)?;
                MatrixFn::time(move |t| {
                    mats.iter().rev().fold(Mat::zeros(mats[0].nrows(), mats[0].ncols()), |acc, c| acc * t + c)
                })
            }
            FieldSpec::SinW {
                base,
                amplitude,
                frequency,
            } => {
                let (b, a) = pair(base, amplitude)?;
                let f = *frequency;
                MatrixFn::markov(move |_, w| &b + &a * (f * w).sin())
            }
            FieldSpec::CosW {
                base,
                amplitude,
                frequency,
            } => {
                let (b, a) = pair(base, amplitude)?;
                let f = *frequency;
                MatrixFn::markov(move |_, w| &b + &a * (f * w).cos())
            }
            FieldSpec::AffineW { base, slope } => {
                let (b, s) = pair(base, slope)?;
                MatrixFn::markov(move |_, w| &b + &s * w)
            }
            FieldSpec::TanhW { base, amplitude } => {
                let (b, a) = pair(base, amplitude)?;
                MatrixFn::markov(move |_, w| &b + &a * w.tanh())
            }
        })
    }
}

impl ProblemSpec {
    pub fn builtin(name: &str) -> Self {
        Self {
            builtin: Some(name.into()),
            ..Self::default()
        }
    }

    /// Builds the problem and rejects it if validation finds violations.
    pub fn build(&self) -> Result<LQProblem, SlqError> {
        let problem = match &self.builtin {
            Some(name) => fixtures::by_name(name)?,
            None => self.build_inline()?,
        };
        let report = validate_problem(&problem);
        if !report.is_ok() {
            let list: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            return Err(SlqError::Config(format!(
                "problem '{}' failed validation: {}",
                problem.name,
                list.join("; ")
            )));
        }
        Ok(problem)
    }

    fn build_inline(&self) -> Result<LQProblem, SlqError> {
        if self.n == 0 || self.m == 0 {
            return Err(SlqError::Config(
                "problem: set `builtin` or the inline dimensions `n`, `m` and fields".into(),
            ));
        }
        let dims = Dimensions::new(self.n, self.m)?;
        let (n, m) = (self.n, self.m);
        let field = |spec: &Option<FieldSpec>, name: &str, rows: usize, cols: usize| match spec {
            Some(s) => s.build(name),
            None => Ok(MatrixFn::zeros(rows, cols)),
        };
        LQProblem::new(
            self.name.clone(),
            dims,
            self.horizon,
            CoefficientField {
                a: field(&self.a, "a", n, n)?,
                b: field(&self.b, "b", n, m)?,
                c: field(&self.c, "c", n, n)?,
                d: field(&self.d, "d", n, m)?,
                bound: self.coefficient_bound,
            },
            WeightField {
                q: field(&self.q, "q", n, n)?,
                s: field(&self.s, "s", m, n)?,
                r: field(&self.r, "r", m, m)?,
                g: field(&self.g, "g", n, n)?,
                bound: self.weight_bound,
            },
        )
    }
}

/// Shared discretization settings. Commands fall back to these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarrierSpec {
    pub depth: usize,
    pub steps: usize,
    pub paths: usize,
    pub basis_degree: u32,
    pub seed: u64,
}

impl Default for CarrierSpec {
    fn default() -> Self {
        Self {
            depth: 12,
            steps: 100,
            paths: 100_000,
            basis_degree: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Riccati ODE by RK4 (deterministic coefficients).
    Ode,
    /// Discrete Riccati recursion of the Gaussian Euler scheme.
    Difference,
    /// Tree dynamic programming.
    TreeDp,
    /// Explicit stochastic Riccati scheme on the tree.
    TreeSre,
    /// Stochastic Riccati scheme by least-squares Monte Carlo.
    Lsmc,
    /// Conjugate gradient on the tree.
    Cg,
    /// Monte Carlo cost of the feedback from the discrete Riccati recursion.
    MonteCarlo,
}

impl Route {
    pub const ALL: [Route; 7] = [
        Route::Ode,
        Route::Difference,
        Route::TreeDp,
        Route::TreeSre,
        Route::Lsmc,
        Route::Cg,
        Route::MonteCarlo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Route::Ode => "ode",
            Route::Difference => "difference",
            Route::TreeDp => "tree-dp",
            Route::TreeSre => "tree-sre",
            Route::Lsmc => "lsmc",
            Route::Cg => "cg",
            Route::MonteCarlo => "monte-carlo",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Route {
    type Err = SlqError;

    fn from_str(s: &str) -> Result<Self, SlqError> {
        Route::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| SlqError::Config(format!("unknown route '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSpec {
    pub routes: Vec<Route>,
    pub xi: Vec<f64>,
    pub ode_steps: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for SolveSpec {
    fn default() -> Self {
        Self {
            routes: vec![Route::Ode, Route::TreeDp],
            xi: vec![1.0],
            ode_steps: 10_000,
            cg_tol: 1e-12,
            cg_max_iter: 5000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteCarrier {
    #[default]
    Tree,
    Ensemble,
}

/// Fixtures that must fail some checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// The worked example with every weight negated: a concave cost.
    NegatedWeights,
    /// The configured problem with `u = 0` in place of the optimum.
    SuboptimalZeroControl,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    pub carrier: SuiteCarrier,
    pub fixture: Option<Fixture>,
    pub tree: TreeSuiteOptions,
    pub ensemble: EnsembleSuiteOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub routes: Vec<Route>,
    pub xi: Vec<f64>,
    /// Tree depths for the tree routes.
    pub depths: Vec<usize>,
    /// Grid sizes for the ensemble and grid routes.
    pub steps: Vec<usize>,
    pub ode_steps: usize,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            routes: vec![Route::Ode, Route::TreeDp, Route::TreeSre, Route::Lsmc],
            xi: vec![1.0],
            depths: vec![8, 10, 12, 14],
            steps: vec![25, 50, 100],
            ode_steps: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Depth,
    Steps,
    Paths,
    Seed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub route: Route,
    pub parameter: SweepParameter,
    pub values: Vec<u64>,
    pub xi: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            route: Route::TreeSre,
            parameter: SweepParameter::Depth,
            values: vec![6, 8, 10, 12, 14],
            xi: vec![1.0],
        }
    }
}

pub fn state_vector(xi: &[f64], n: usize) -> Result<Vector, SlqError> {
    match xi.len() {
        1 => Ok(Vector::from_element(n, xi[0])),
        len if len == n => Ok(Vector::from_column_slice(xi)),
        len => Err(SlqError::Config(format!("initial state has length {len} but n = {n}"))),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, SlqError> {
        toml::from_str(text).map_err(|e| SlqError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SlqError> {
        let text = std::fs::read_to_string(path).map_err(|e| SlqError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Applies command-line overrides and fixture defaults. Idempotent, so a
    /// manifest written after resolution resolves to itself.
    pub fn resolve(mut self, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>) -> Self {
        if out.is_some() {
            self.out = out;
        }
        if seed.is_some() {
            self.seed = seed;
        }
        if threads.is_some() {
            self.threads = threads;
        }
        if let Some(seed) = self.seed {
            self.carrier.seed = seed;
            self.verify.tree.seed = seed;
            self.verify.ensemble.seed = seed;
        }
        match self.verify.fixture {
            Some(Fixture::NegatedWeights) => {
                self.problem = ProblemSpec::builtin("negated-weights");
                let checks = vec![CheckKind::Cg, CheckKind::Convexity];
                self.verify.carrier = SuiteCarrier::Tree;
                self.verify.tree.checks = checks.clone();
                self.verify.tree.expected_failures = checks;
            }
            Some(Fixture::SuboptimalZeroControl) => {
                let checks = vec![
                    CheckKind::Stationarity,
                    CheckKind::OptimalityPrinciple,
                    CheckKind::CostPerturbation,
                ];
                self.verify.carrier = SuiteCarrier::Tree;
                self.verify.tree.control = SuiteControl::Zero;
                self.verify.tree.checks = checks.clone();
                self.verify.tree.expected_failures = checks;
            }
            None => {}
        }
        self.artifact = None;
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("slq-out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn resolution_is_idempotent() {
        let mut cfg = ExperimentConfig::default();
        cfg.verify.fixture = Some(Fixture::SuboptimalZeroControl);
        let once = cfg.resolve(Some("x".into()), Some(7), None);
        let twice = ExperimentConfig::from_toml(&once.to_toml()).unwrap().resolve(None, None, None);
        assert_eq!(once, twice);
        assert_eq!(once.verify.tree.seed, 7);
        assert_eq!(once.verify.tree.control, SuiteControl::Zero);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[problem]\nbuiltn = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml("[solve]\nroutes = [\"warp\"]").is_err());
    }

    #[test]
    fn inline_families() {
        let text = r#"
            [problem]
            name = "mixed"
            n = 1
            m = 1
            horizon = 1.0
            coefficient_bound = 2.0
            weight_bound = 3.0
            a = { family = "poly-t", coeffs = [[[0.0]], [[1.0]]] }
            b = { family = "constant", value = [[1.0]] }
            c = { family = "sin-w", base = [[0.0]], amplitude = [[0.5]] }
            d = { family = "affine-w", base = [[0.1]], slope = [[0.0]] }
            q = { family = "cos-w", base = [[1.0]], amplitude = [[0.5]], frequency = 2.0 }
            r = { family = "constant", value = [[1.0]] }
            g = { family = "tanh-w", base = [[2.0]], amplitude = [[1.0]] }
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let p = cfg.problem.build().unwrap();
        let b = p.eval_all(0.5, 0.3).unwrap();
        assert!((b.a[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((b.c[(0, 0)] - 0.5 * 0.3f64.sin()).abs() < 1e-15);
        assert!((b.q[(0, 0)] - (1.0 + 0.5 * 0.6f64.cos())).abs() < 1e-15);
        assert!((p.terminal(0.3)[(0, 0)] - (2.0 + 0.3f64.tanh())).abs() < 1e-15);
        assert!(!p.is_deterministic());
    }

    #[test]
    fn inline_problem_is_validated() {
        assert!(ProblemSpec::default().build().is_err());
        let mut spec = ProblemSpec {
            n: 1,
            m: 1,
            ..ProblemSpec::default()
        };
        spec.r = Some(FieldSpec::Constant {
            value: vec![vec![10.0]],
        });
        assert!(matches!(spec.build(), Err(SlqError::Config(_))));
        spec.r = Some(FieldSpec::Constant {
            value: vec![vec![1.0, 0.0]],
        });
        assert!(spec.build().is_err());
    }
}
