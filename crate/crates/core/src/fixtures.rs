//! Built-in problem instances.

use crate::error::{Result, SlqError};
use crate::model::{CoefficientField, Dimensions, LQProblem, Mat, MatrixFn, WeightField};

/// Names accepted by [`by_name`].
pub const BUILTIN_NAMES: &[&str] = &[
    "indefinite-weight",
    "standard-condition",
    "tanh-terminal",
    "markov-random",
    "negated-weights",
    "zero",
];

fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// All coefficients and weights identically zero.
pub fn zero(n: usize, m: usize, horizon: f64) -> LQProblem {
    let dims = Dimensions::new(n, m).expect("positive dimensions");
    LQProblem::new(
        "zero",
        dims,
        horizon,
        CoefficientField {
            a: MatrixFn::zeros(n, n),
            b: MatrixFn::zeros(n, m),
            c: MatrixFn::zeros(n, n),
            d: MatrixFn::zeros(n, m),
            bound: 1.0,
        },
        WeightField {
            q: MatrixFn::zeros(n, n),
            s: MatrixFn::zeros(m, n),
            r: MatrixFn::zeros(m, m),
            g: MatrixFn::zeros(n, n),
            bound: 1.0,
        },
    )
    .expect("valid horizon")
}

/// `dX = u1 ds + u2 dW` on [0, 1] with cost `4|X(1)|^2 + int 5|u1|^2 - |u2|^2`.
/// `R = diag(5, -1)` is indefinite and `D = (0, 1)` is singular, yet the cost
/// is uniformly convex. Value kernel `P(t) = 20 / (9 - 4t)`.
pub fn indefinite_weight() -> LQProblem {
    let dims = Dimensions::new(1, 2).unwrap();
    LQProblem::new(
        "indefinite-weight",
        dims,
        1.0,
        CoefficientField {
            a: MatrixFn::zeros(1, 1),
            b: MatrixFn::constant(Mat::from_row_slice(1, 2, &[1.0, 0.0])),
            c: MatrixFn::zeros(1, 1),
            d: MatrixFn::constant(Mat::from_row_slice(1, 2, &[0.0, 1.0])),
            bound: 1.0,
        },
        WeightField {
            q: MatrixFn::zeros(1, 1),
            s: MatrixFn::zeros(2, 1),
            r: MatrixFn::constant(Mat::from_row_slice(2, 2, &[5.0, 0.0, 0.0, -1.0])),
            g: MatrixFn::constant(scalar(4.0)),
            bound: 5.0,
        },
    )
    .unwrap()
}

/// Analytic value kernel of [`indefinite_weight`].
pub fn indefinite_weight_kernel(t: f64) -> f64 {
    20.0 / (9.0 - 4.0 * t)
}

/// Scalar problem with `A = B = C = D = 1`, `Q = R = G = 1`, `S = 0`, `T = 1`.
pub fn standard_condition() -> LQProblem {
    let dims = Dimensions::new(1, 1).unwrap();
    let one = || MatrixFn::constant(scalar(1.0));
    LQProblem::new(
        "standard-condition",
        dims,
        1.0,
        CoefficientField {
            a: one(),
            b: one(),
            c: one(),
            d: one(),
            bound: 1.0,
        },
        WeightField {
            q: one(),
            s: MatrixFn::zeros(1, 1),
            r: one(),
            g: one(),
            bound: 1.0,
        },
    )
    .unwrap()
}

/// Uncontrolled scalar problem with random terminal weight
/// `G = 2 + tanh(W(T))` and no running cost, so `P(t) = E[G | F_t]`.
pub fn tanh_terminal() -> LQProblem {
    let dims = Dimensions::new(1, 1).unwrap();
    LQProblem::new(
        "tanh-terminal",
        dims,
        1.0,
        CoefficientField {
            a: MatrixFn::zeros(1, 1),
            b: MatrixFn::zeros(1, 1),
            c: MatrixFn::zeros(1, 1),
            d: MatrixFn::zeros(1, 1),
            bound: 1.0,
        },
        WeightField {
            q: MatrixFn::zeros(1, 1),
            s: MatrixFn::zeros(1, 1),
            r: MatrixFn::constant(scalar(1.0)),
            g: MatrixFn::markov(|_, w| scalar(2.0 + w.tanh())),
            bound: 3.0,
        },
    )
    .unwrap()
}

/// Controlled scalar problem whose drift and terminal weight both depend on
/// the Brownian value: `A = 0.2 sin(w)`, `B = 1`, `C = 0.3`, `D = 0.5`,
/// `Q = R = 1`, `G = 2 + tanh(w)`.
pub fn markov_random() -> LQProblem {
    let dims = Dimensions::new(1, 1).unwrap();
    LQProblem::new(
        "markov-random",
        dims,
        1.0,
        CoefficientField {
            a: MatrixFn::markov(|_, w| scalar(0.2 * w.sin())),
            b: MatrixFn::constant(scalar(1.0)),
            c: MatrixFn::constant(scalar(0.3)),
            d: MatrixFn::constant(scalar(0.5)),
            bound: 1.0,
        },
        WeightField {
            q: MatrixFn::constant(scalar(1.0)),
            s: MatrixFn::zeros(1, 1),
            r: MatrixFn::constant(scalar(1.0)),
            g: MatrixFn::markov(|_, w| scalar(2.0 + w.tanh())),
            bound: 3.0,
        },
    )
    .unwrap()
}

/// [`indefinite_weight`] with every weight negated: a concave cost.
pub fn negated_weights() -> LQProblem {
    let mut p = indefinite_weight().with_scaled_weights(-1.0);
    p.name = "negated-weights".into();
    p
}

pub fn by_name(name: &str) -> Result<LQProblem> {
    match name {
        "indefinite-weight" => Ok(indefinite_weight()),
        "standard-condition" => Ok(standard_condition()),
        "tanh-terminal" => Ok(tanh_terminal()),
        "markov-random" => Ok(markov_random()),
        "negated-weights" => Ok(negated_weights()),
        "zero" => Ok(zero(1, 1, 1.0)),
        other => Err(SlqError::Config(format!(
            "unknown built-in problem '{other}' (known: {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}
