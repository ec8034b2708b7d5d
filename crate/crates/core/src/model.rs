//! Problem instances: state dimensions, coefficient and weight fields, and
//! validation against the boundedness/symmetry assumptions.
//!
//! Random coefficients are Markov functionals of the current Brownian value:
//! every field is an evaluator `(t, w) -> matrix` where `w = W(t)`. The
//! terminal weight `G` is evaluated at `(T, W(T))`.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlqError};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance for asymmetry of raw weight evaluations.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Points per axis of the validation probe lattice.
pub const PROBE_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
}

impl Dimensions {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(SlqError::Dimension(format!(
                "state and control dimensions must be positive (n = {n}, m = {m})"
            )));
        }
        Ok(Self { n, m })
    }
}

/// How a field depends on `(t, w)`. Ordered from least to most random.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Constant,
    DeterministicTimeVarying,
    MarkovInBrownian,
}

type EvalFn = dyn Fn(f64, f64) -> Mat + Send + Sync;

/// A matrix-valued evaluator `(t, w) -> M`.
#[derive(Clone)]
pub struct MatrixFn {
    kind: FieldKind,
    f: Arc<EvalFn>,
}

impl MatrixFn {
    pub fn constant(value: Mat) -> Self {
        Self {
            kind: FieldKind::Constant,
            f: Arc::new(move |_, _| value.clone()),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    pub fn time(f: impl Fn(f64) -> Mat + Send + Sync + 'static) -> Self {
        Self {
            kind: FieldKind::DeterministicTimeVarying,
            f: Arc::new(move |t, _| f(t)),
        }
    }

    pub fn markov(f: impl Fn(f64, f64) -> Mat + Send + Sync + 'static) -> Self {
        Self {
            kind: FieldKind::MarkovInBrownian,
            f: Arc::new(f),
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    /// Raw evaluation; `w` is ignored by deterministic fields.
    pub fn eval(&self, t: f64, w: f64) -> Mat {
        match self.kind {
            FieldKind::MarkovInBrownian => (self.f)(t, w),
            _ => (self.f)(t, 0.0),
        }
    }

    /// Multiplies every evaluation by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = Arc::clone(&self.f);
        Self {
            kind: self.kind,
            f: Arc::new(move |t, w| f(t, w) * factor),
        }
    }

    /// Adds a constant matrix to every evaluation.
    pub fn shifted(&self, offset: Mat) -> Self {
        let f = Arc::clone(&self.f);
        Self {
            kind: self.kind,
            f: Arc::new(move |t, w| f(t, w) + &offset),
        }
    }
}

impl fmt::Debug for MatrixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatrixFn").field("kind", &self.kind).finish()
    }
}

/// State-equation coefficients `A, B, C, D` with a declared entrywise bound.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    pub a: MatrixFn,
    pub b: MatrixFn,
    pub c: MatrixFn,
    pub d: MatrixFn,
    pub bound: f64,
}

/// Cost weights `Q, S, R` and terminal `G` with a declared entrywise bound.
/// No definiteness is required.
#[derive(Clone, Debug)]
pub struct WeightField {
    pub q: MatrixFn,
    pub s: MatrixFn,
    pub r: MatrixFn,
    pub g: MatrixFn,
    pub bound: f64,
}

/// All coefficient matrices at one `(t, w)`; `q` and `r` are symmetrized.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientBundle {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub q: Mat,
    pub s: Mat,
    pub r: Mat,
}

#[derive(Clone, Debug)]
pub struct LQProblem {
    pub name: String,
    pub dims: Dimensions,
    pub horizon: f64,
    pub coeffs: CoefficientField,
    pub weights: WeightField,
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

impl LQProblem {
    pub fn new(
        name: impl Into<String>,
        dims: Dimensions,
        horizon: f64,
        coeffs: CoefficientField,
        weights: WeightField,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SlqError::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            name: name.into(),
            dims,
            horizon,
            coeffs,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.dims.n
    }

    pub fn m(&self) -> usize {
        self.dims.m
    }

    fn fields(&self) -> [(&'static str, &MatrixFn); 8] {
        [
            ("A", &self.coeffs.a),
            ("B", &self.coeffs.b),
            ("C", &self.coeffs.c),
            ("D", &self.coeffs.d),
            ("Q", &self.weights.q),
            ("S", &self.weights.s),
            ("R", &self.weights.r),
            ("G", &self.weights.g),
        ]
    }

    /// Most random kind over all fields.
    pub fn kind(&self) -> FieldKind {
        self.fields()
            .iter()
            .map(|(_, f)| f.kind())
            .max()
            .unwrap_or(FieldKind::Constant)
    }

    pub fn is_deterministic(&self) -> bool {
        self.kind() != FieldKind::MarkovInBrownian
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * self.horizon;
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(SlqError::Domain {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Evaluates `A, B, C, D, Q, S, R` at `(t, w)`.
    pub fn eval_all(&self, t: f64, w: f64) -> Result<CoefficientBundle> {
        self.check_time(t)?;
        Ok(self.bundle_unchecked(t, w))
    }

    pub(crate) fn bundle_unchecked(&self, t: f64, w: f64) -> CoefficientBundle {
        CoefficientBundle {
            a: self.coeffs.a.eval(t, w),
            b: self.coeffs.b.eval(t, w),
            c: self.coeffs.c.eval(t, w),
            d: self.coeffs.d.eval(t, w),
            q: symmetrize(&self.weights.q.eval(t, w)),
            s: self.weights.s.eval(t, w),
            r: symmetrize(&self.weights.r.eval(t, w)),
        }
    }

    /// Symmetrized terminal weight `G(W(T))`.
    pub fn terminal(&self, w: f64) -> Mat {
        symmetrize(&self.weights.g.eval(self.horizon, w))
    }

    /// Same dynamics with every weight multiplied by `factor`.
    pub fn with_scaled_weights(&self, factor: f64) -> Self {
        let mut p = self.clone();
        p.weights.q = p.weights.q.scaled(factor);
        p.weights.s = p.weights.s.scaled(factor);
        p.weights.r = p.weights.r.scaled(factor);
        p.weights.g = p.weights.g.scaled(factor);
        p.name = format!("{}-weights-x{factor}", self.name);
        p
    }

    /// Same problem with `R` replaced by `R - eps I`.
    pub fn with_control_penalty_shift(&self, eps: f64) -> Self {
        let mut p = self.clone();
        let m = self.m();
        p.weights.r = p.weights.r.shifted(-eps * Mat::identity(m, m));
        p.weights.bound = self.weights.bound + eps.abs();
        p.name = format!("{}-r-shift-{eps}", self.name);
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape {
        field: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    Asymmetric {
        field: &'static str,
        t: f64,
        w: f64,
        max_asymmetry: f64,
    },
    ExceedsBound {
        field: &'static str,
        t: f64,
        w: f64,
        value: f64,
        bound: f64,
    },
    NonFinite {
        field: &'static str,
        t: f64,
        w: f64,
    },
    EvaluatorFailure {
        field: &'static str,
        t: f64,
        w: f64,
        message: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { field, expected, found } => write!(
                f,
                "{field}: shape {}x{} (expected {}x{})",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::Asymmetric { field, t, w, max_asymmetry } => {
                write!(f, "{field}: asymmetry {max_asymmetry:e} at (t={t}, w={w})")
            }
            Violation::ExceedsBound { field, t, w, value, bound } => {
                write!(f, "{field}: entry {value} exceeds bound {bound} at (t={t}, w={w})")
            }
            Violation::NonFinite { field, t, w } => {
                write!(f, "{field}: non-finite entry at (t={t}, w={w})")
            }
            Violation::EvaluatorFailure { field, t, w, message } => {
                write!(f, "{field}: evaluator failed at (t={t}, w={w}): {message}")
            }
        }
    }
}

/// Result of [`validate_problem`]. Empty means accepted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Probes every field on a 101 x 101 lattice of `t in [0, T]`,
/// `w in [-3 sqrt(T), 3 sqrt(T)]` for shape, symmetry and bound violations.
/// At most one violation of each type is recorded per field.
pub fn validate_problem(p: &LQProblem) -> ValidationReport {
    let (n, m) = (p.n(), p.m());
    let shapes = [
        (n, n),
        (n, m),
        (n, n),
        (n, m),
        (n, n),
        (m, n),
        (m, m),
        (n, n),
    ];
    let symmetric = ["Q", "R", "G"];
    let mut report = ValidationReport::default();
    let w_max = 3.0 * p.horizon.sqrt();
    let steps = (PROBE_POINTS - 1) as f64;

    for ((name, field), expected) in p.fields().into_iter().zip(shapes) {
        let bound = if matches!(name, "A" | "B" | "C" | "D") {
            p.coeffs.bound
        } else {
            p.weights.bound
        };
        let is_terminal = name == "G";
        let mut seen = [false; 5];
        let mut record = |slot: usize, v: Violation, report: &mut ValidationReport| {
            if !seen[slot] {
                seen[slot] = true;
                report.violations.push(v);
            }
        };

        'probe: for ti in 0..PROBE_POINTS {
            let t = if is_terminal {
                p.horizon
            } else {
                p.horizon * ti as f64 / steps
            };
            for wi in 0..PROBE_POINTS {
                let w = -w_max + 2.0 * w_max * wi as f64 / steps;
                let value = match catch_unwind(AssertUnwindSafe(|| field.eval(t, w))) {
                    Ok(v) => v,
                    Err(payload) => {
                        let message = payload
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| payload.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "panic".to_string());
                        record(4, Violation::EvaluatorFailure { field: name, t, w, message }, &mut report);
                        continue;
                    }
                };
                if value.shape() != expected {
                    record(
                        0,
                        Violation::Shape { field: name, expected, found: value.shape() },
                        &mut report,
                    );
                    break 'probe;
                }
                if value.iter().any(|x| !x.is_finite()) {
                    record(3, Violation::NonFinite { field: name, t, w }, &mut report);
                    continue;
                }
                if symmetric.contains(&name) {
                    let asym = (&value - value.transpose()).amax();
                    if asym > SYMMETRY_TOL {
                        record(
                            1,
                            Violation::Asymmetric { field: name, t, w, max_asymmetry: asym },
                            &mut report,
                        );
                    }
                }
                let peak = value.amax();
                if peak > bound * (1.0 + 1e-12) {
                    record(
                        2,
                        Violation::ExceedsBound { field: name, t, w, value: peak, bound },
                        &mut report,
                    );
                }
            }
            if is_terminal {
                break;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn zero_problem_is_accepted() {
        let p = fixtures::zero(1, 1, 1.0);
        assert!(validate_problem(&p).is_ok());
    }

    #[test]
    fn indefinite_example_is_accepted() {
        let p = fixtures::indefinite_weight();
        let report = validate_problem(&p);
        assert!(report.is_ok(), "{:?}", report.violations);
    }

    #[test]
    fn asymmetric_r_is_flagged() {
        let mut p = fixtures::zero(1, 2, 1.0);
        p.weights.r = MatrixFn::constant(Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let report = validate_problem(&p);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Asymmetric { field: "R", .. })));
    }

    #[test]
    fn shape_bound_and_panics_are_reported() {
        let mut p = fixtures::zero(2, 1, 1.0);
        p.coeffs.b = MatrixFn::zeros(1, 1);
        p.coeffs.a = MatrixFn::markov(|_, w| Mat::from_element(2, 2, w));
        p.weights.q = MatrixFn::markov(|_, w| {
            if w > 1.0 {
                panic!("boom");
            }
            Mat::zeros(2, 2)
        });
        let report = validate_problem(&p);
        let has = |pred: fn(&Violation) -> bool| report.violations.iter().any(pred);
        assert!(has(|v| matches!(v, Violation::Shape { field: "B", .. })));
        assert!(has(|v| matches!(v, Violation::ExceedsBound { field: "A", .. })));
        assert!(has(|v| matches!(v, Violation::EvaluatorFailure { field: "Q", .. })));
    }

    #[test]
    fn eval_all_examples() {
        let p = fixtures::indefinite_weight();
        let b = p.eval_all(0.5, 0.2).unwrap();
        assert_eq!(b.r, Mat::from_row_slice(2, 2, &[5.0, 0.0, 0.0, -1.0]));
        assert_eq!(b.d, Mat::from_row_slice(1, 2, &[0.0, 1.0]));
        assert_eq!(p.terminal(1.7)[(0, 0)], 4.0);
        assert_eq!(p.terminal(-0.3)[(0, 0)], 4.0);

        let mut q = fixtures::zero(2, 1, 1.0);
        q.coeffs.a = MatrixFn::markov(|_, w| Mat::identity(2, 2) * w.sin());
        assert_eq!(q.eval_all(0.3, 0.0).unwrap().a, Mat::zeros(2, 2));
    }

    #[test]
    fn eval_all_rejects_times_outside_horizon() {
        let p = fixtures::indefinite_weight();
        assert!(matches!(p.eval_all(1.5, 0.0), Err(SlqError::Domain { .. })));
        assert!(matches!(p.eval_all(-0.1, 0.0), Err(SlqError::Domain { .. })));
    }

    #[test]
    fn evaluation_is_pure_and_symmetrization_idempotent() {
        let mut p = fixtures::zero(2, 2, 1.0);
        p.weights.q = MatrixFn::markov(|t, w| Mat::from_row_slice(2, 2, &[t, w, 0.3, 1.0]));
        let a = p.eval_all(0.25, 0.7).unwrap();
        let b = p.eval_all(0.25, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(symmetrize(&a.q), a.q);
    }

    #[test]
    fn deterministic_fields_ignore_w() {
        let f = MatrixFn::time(|t| Mat::from_element(1, 1, t));
        assert_eq!(f.eval(0.5, 3.0), f.eval(0.5, -3.0));
    }

    #[test]
    fn dimensions_reject_zero() {
        assert!(Dimensions::new(0, 1).is_err());
        assert!(Dimensions::new(1, 0).is_err());
        assert!(Dimensions::new(3, 2).is_ok());
    }
}
