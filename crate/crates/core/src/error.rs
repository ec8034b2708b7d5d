use thiserror::Error;

/// Errors raised by the solvers and the problem model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlqError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("time {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("tree depth {depth} outside 1..=24")]
    TreeSize { depth: usize },

    #[error(
        "control Hessian not positive definite at node ({level}, {index}): min eigenvalue {min_eigenvalue:e}"
    )]
    IndefiniteHessian {
        level: usize,
        index: usize,
        min_eigenvalue: f64,
    },

    #[error("Riccati blow-up at t = {t}{}: cond(R + D'PD) = {condition:e}", node_suffix(.node))]
    RiccatiBlowup {
        t: f64,
        node: Option<(usize, usize)>,
        condition: f64,
    },

    #[error("feedback gain undefined: cond(R + D'PD) = {condition:e}")]
    SingularGain { condition: f64 },

    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error("non-finite state on path {path} at step {step}")]
    Simulation { path: usize, step: usize },

    #[error("not uniformly convex: curvature {curvature:e} at CG iteration {iteration}")]
    NotUniformlyConvex { iteration: usize, curvature: f64 },

    #[error("CG did not converge in {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("carrier mismatch: {0}")]
    CarrierMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn node_suffix(node: &Option<(usize, usize)>) -> String {
    match node {
        Some((k, j)) => format!(" (node {k}, {j})"),
        None => String::new(),
    }
}

impl From<std::io::Error> for SlqError {
    fn from(e: std::io::Error) -> Self {
        SlqError::Io(e.to_string())
    }
}

impl From<csv::Error> for SlqError {
    fn from(e: csv::Error) -> Self {
        SlqError::Io(e.to_string())
    }
}

pub type Result<T, E = SlqError> = std::result::Result<T, E>;
