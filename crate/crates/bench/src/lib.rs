//! Shared inputs for the solver benchmarks.

use slq_core::fixtures::{indefinite_weight, tanh_terminal};
use slq_core::{LQProblem, OperatorContext, PathEnsemble, TreeModel, Vector};

pub fn unit_state() -> Vector {
    Vector::from_vec(vec![1.0])
}

pub fn worked_example() -> LQProblem {
    indefinite_weight()
}

pub fn random_coefficients() -> LQProblem {
    tanh_terminal()
}

pub fn tree_context(depth: usize) -> OperatorContext {
    OperatorContext::tree(TreeModel::build(depth, &worked_example()).expect("valid depth"))
}

pub fn ensemble(steps: usize, paths: usize) -> PathEnsemble {
    slq_core::generate_ensemble(steps, paths, 1.0, 0).expect("valid ensemble")
}
