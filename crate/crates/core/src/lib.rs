//! Indefinite stochastic linear-quadratic control with coefficients that are
//! functions of time and the current Brownian value.

pub mod bsde;
pub mod error;
pub mod fixtures;
pub mod lattice;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod riccati;
pub mod sde;
pub mod verify;

pub use bsde::{
    solve_adjoint, solve_cost_kernel, solve_cost_kernel_tree, BackwardSolution, KernelScheme, KernelSolution,
    Projection, RegressionBasis,
};
pub use error::{Result, SlqError};
pub use lattice::{dp_solve, BernoulliTree, DpSolution, TreeModel, TreeProcess};
pub use model::{
    validate_problem, CoefficientBundle, CoefficientField, Dimensions, FieldKind, LQProblem, Mat,
    MatrixFn, ValidationReport, Vector, Violation, WeightField,
};
pub use operators::{
    apply_l, apply_n, convexity_probe, inner_product, solve_open_loop_cg, CgSolution, ControlLayout,
    ControlVector, ConvexityCertificate, OperatorContext,
};
pub use riccati::{
    solve_riccati_difference, solve_riccati_ode, solve_sre_lsmc, solve_sre_tree, GridRiccati,
    RegressionRiccati, TreeRiccati,
};
pub use sde::{
    evaluate_cost, generate_ensemble, simulate, simulate_costs, ControlPolicy, ControlTable, CostEstimate,
    GainSchedule, PathEnsemble, StateEnsemble,
};
pub use verify::{CheckKind, CheckReport, Outcome, SuiteReport, Tolerances};
