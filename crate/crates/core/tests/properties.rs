use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slq_core::lattice::discrete_cost;
use slq_core::operators::random_unit_control;
use slq_core::verify::{run_tree_suite, TreeSuiteOptions};
use slq_core::{
    apply_n, dp_solve, generate_ensemble, inner_product, simulate, solve_cost_kernel_tree, solve_open_loop_cg,
    solve_sre_tree, validate_problem, CheckKind, CoefficientField, ControlPolicy, ControlTable, ControlVector,
    Dimensions, KernelScheme, LQProblem, Mat, MatrixFn, OperatorContext, TreeModel, Vector, WeightField,
};

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn psd(rng: &mut ChaCha8Rng, n: usize, scale: f64, shift: f64) -> Mat {
    let a = random_mat(rng, n, n, scale);
    &a * a.transpose() / n as f64 + Mat::identity(n, n) * shift
}

/// A field that is either constant or wobbles with `sin(W)`.
fn field(base: Mat, wobble: Mat, markov: bool) -> MatrixFn {
    if markov {
        MatrixFn::markov(move |_, w| &base + &wobble * w.sin())
    } else {
        MatrixFn::constant(base)
    }
}

/// Uniformly convex problem with small random coefficients: `Q, G >= 0` and
/// `R >= I/2`.
fn convex_problem(n: usize, m: usize, seed: u64, markov: bool) -> LQProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = |rows, cols, scale| {
        let base = random_mat(&mut rng, rows, cols, scale);
        let wobble = random_mat(&mut rng, rows, cols, 0.2 * scale);
        field(base, wobble, markov)
    };
    let (a, b, c, d) = (f(n, n, 0.5), f(n, m, 0.5), f(n, n, 0.3), f(n, m, 0.3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let q = MatrixFn::constant(psd(&mut rng, n, 1.0, 0.0));
    let r = MatrixFn::constant(psd(&mut rng, m, 1.0, 0.5));
    let g = psd(&mut rng, n, 1.0, 0.1);
    let g_wobble = psd(&mut rng, n, 0.3, 0.0);
    let g = if markov {
        MatrixFn::markov(move |_, w| &g + &g_wobble * w.cos().powi(2))
    } else {
        MatrixFn::constant(g)
    };
    LQProblem::new(
        "random-convex",
        Dimensions::new(n, m).unwrap(),
        1.0,
        CoefficientField { a, b, c, d, bound: 1.0 },
        WeightField {
            q,
            s: MatrixFn::zeros(m, n),
            r,
            g,
            bound: 10.0,
        },
    )
    .unwrap()
}

fn random_state(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
}

fn problem_strategy() -> impl Strategy<Value = (usize, usize, u64, bool)> {
    (1usize..=2, 1usize..=2, any::<u64>(), any::<bool>())
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn evaluation_is_pure_and_weights_symmetric(
        (n, m, seed, markov) in problem_strategy(),
        t in 0.0f64..1.0,
        w in -3.0f64..3.0,
    ) {
        let p = convex_problem(n, m, seed, markov);
        let once = p.eval_all(t, w).unwrap();
        let twice = p.eval_all(t, w).unwrap();
        prop_assert_eq!(&once.a, &twice.a);
        prop_assert_eq!(&once.r, &twice.r);
        prop_assert!((&once.q - once.q.transpose()).amax() == 0.0);
        prop_assert!((&once.r - once.r.transpose()).amax() == 0.0);
        let g = p.terminal(w);
        prop_assert!((&g - g.transpose()).amax() == 0.0);
    }

    #[test]
    fn declared_bounds_are_probed(
        (n, m, seed, markov) in problem_strategy(),
        factor in 3.0f64..10.0,
    ) {
        let p = convex_problem(n, m, seed, markov);
        prop_assert!(validate_problem(&p).is_ok());
        let mut loose = p.clone();
        loose.coeffs.a = MatrixFn::constant(Mat::from_element(n, n, factor));
        prop_assert!(!validate_problem(&loose).is_ok());
    }

    #[test]
    fn dp_kernel_is_symmetric_and_terminal_exact(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..8,
    ) {
        let p = convex_problem(n, m, seed, markov);
        let model = TreeModel::build(depth, &p).unwrap();
        let dp = dp_solve(&model).unwrap();
        for (_, _, k) in dp.p.iter() {
            prop_assert!((k - k.transpose()).amax() <= 1e-12);
        }
        for j in 0..1usize << depth {
            prop_assert_eq!(dp.p.get(depth, j), model.terminal(j));
        }
    }

    #[test]
    fn tree_riccati_is_symmetric_and_terminal_exact(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..8,
    ) {
        let p = convex_problem(n, m, seed, markov);
        let model = TreeModel::build(depth, &p).unwrap();
        let sre = solve_sre_tree(&model).unwrap();
        for (_, _, k) in sre.p.iter() {
            prop_assert!((k - k.transpose()).amax() <= 1e-10);
        }
        for (_, _, l) in sre.lambda.iter() {
            prop_assert!((l - l.transpose()).amax() <= 1e-10);
        }
        for j in 0..1usize << depth {
            prop_assert_eq!(sre.p.get(depth, j), model.terminal(j));
        }
        prop_assert!(sre.certificate.certified);
    }

    #[test]
    fn operator_is_self_adjoint_and_linear(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..7,
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let ctx = OperatorContext::tree(TreeModel::build(depth, &convex_problem(n, m, seed, markov)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let u = random_unit_control(&ctx, false, &mut rng);
        let v = random_unit_control(&ctx, true, &mut rng);
        let (nu, nv) = (apply_n(&ctx, &u).unwrap(), apply_n(&ctx, &v).unwrap());
        let lhs = inner_product(&nu, &v).unwrap();
        let rhs = inner_product(&u, &nv).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * u.norm() * v.norm());

        let combo = apply_n(&ctx, &u.combine(alpha, &v, beta).unwrap()).unwrap();
        let expected = nu.combine(alpha, &nv, beta).unwrap();
        prop_assert!(combo.combine(1.0, &expected, -1.0).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn inner_product_is_symmetric_and_positive(
        (n, m, seed, markov) in problem_strategy(),
        depth in 1usize..7,
    ) {
        let ctx = OperatorContext::tree(TreeModel::build(depth, &convex_problem(n, m, seed, markov)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_unit_control(&ctx, false, &mut rng);
        let v = random_unit_control(&ctx, false, &mut rng);
        prop_assert_eq!(inner_product(&u, &v).unwrap(), inner_product(&v, &u).unwrap());
        prop_assert!(inner_product(&u, &u).unwrap() > 0.0);
        prop_assert!((inner_product(&u, &u).unwrap() - u.norm().powi(2)).abs() <= 1e-12);
    }

    #[test]
    fn cost_splits_into_operator_form(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..7,
    ) {
        let model = TreeModel::build(depth, &convex_problem(n, m, seed, markov)).unwrap();
        let ctx = OperatorContext::tree(model.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = random_state(n, &mut rng);
        let u = random_unit_control(&ctx, false, &mut rng).scaled(rng.random_range(0.1..3.0));
        let direct = discrete_cost(&model, &xi, &u.to_tree());
        let kernel = solve_cost_kernel_tree(&model, KernelScheme::Exact).kernel.root().clone();
        let lin = slq_core::apply_l(&ctx, &xi).unwrap();
        let form = inner_product(&apply_n(&ctx, &u).unwrap(), &u).unwrap()
            + 2.0 * inner_product(&lin, &u).unwrap()
            + xi.dot(&(&kernel * &xi));
        prop_assert!((direct - form).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn perturbing_the_optimum_costs_exactly_the_curvature(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..7,
        eps in -1.0f64..1.0,
    ) {
        let ctx = OperatorContext::tree(TreeModel::build(depth, &convex_problem(n, m, seed, markov)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = random_state(n, &mut rng);
        let u = solve_open_loop_cg(&ctx, &xi, 1e-13, 5000).unwrap().control;
        let v = random_unit_control(&ctx, false, &mut rng);
        let base = ctx.cost(&xi, &u).unwrap().mean;
        let gap = ctx.cost(&xi, &u.combine(1.0, &v, eps).unwrap()).unwrap().mean - base;
        let curvature = inner_product(&apply_n(&ctx, &v).unwrap(), &v).unwrap();
        prop_assert!(gap >= -1e-9);
        prop_assert!((gap - eps * eps * curvature).abs() <= 1e-8);
    }

    #[test]
    fn cg_and_dp_agree_on_random_problems(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..7,
    ) {
        let model = TreeModel::build(depth, &convex_problem(n, m, seed, markov)).unwrap();
        let ctx = OperatorContext::tree(model.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = random_state(n, &mut rng);
        let sol = solve_open_loop_cg(&ctx, &xi, 1e-13, 5000).unwrap();
        let dp = dp_solve(&model).unwrap().value(&xi);
        prop_assert!((ctx.cost(&xi, &sol.control).unwrap().mean - dp).abs() <= 1e-9 * dp.abs().max(1.0));
        prop_assert!(sol.energy_monotone());
    }

    #[test]
    fn lowering_the_control_penalty_lowers_the_value(
        (n, m, seed, markov) in problem_strategy(),
        depth in 2usize..8,
    ) {
        let p = convex_problem(n, m, seed, markov);
        let lower = p.with_control_penalty_shift(0.1);
        let base = dp_solve(&TreeModel::build(depth, &p).unwrap()).unwrap();
        let shifted = dp_solve(&TreeModel::build(depth, &lower).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = random_state(n, &mut rng);
        prop_assert!(shifted.value(&xi) <= base.value(&xi) + 1e-9);
    }

    #[test]
    fn state_map_is_linear_in_initial_state_and_control(
        (n, m, seed, markov) in problem_strategy(),
        steps in 1usize..20,
    ) {
        let p = convex_problem(n, m, seed, markov);
        let ens = generate_ensemble(steps, 40, p.horizon, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x1, x2) = (random_state(n, &mut rng), random_state(n, &mut rng));
        let table = |rng: &mut ChaCha8Rng| {
            let mut t = ControlTable::zeros(&ens, m);
            for path in 0..ens.paths() {
                for k in 0..steps {
                    for v in t.get_mut(path, k) {
                        *v = rng.random_range(-1.0..1.0);
                    }
                }
            }
            t
        };
        let (u1, u2) = (table(&mut rng), table(&mut rng));
        let run = |xi: &Vector, u: &ControlTable| simulate(&p, &ControlPolicy::OpenLoop(u.clone()), xi, &ens).unwrap();
        let (a, b) = (run(&x1, &u1), run(&x2, &u2));
        let sum = run(&(&x1 + &x2), &u1.combine(1.0, &u2, 1.0));
        for path in 0..ens.paths() {
            prop_assert_eq!(a.x(path, 0), x1.as_slice());
            for k in 0..=steps {
                for i in 0..n {
                    let expected = a.x(path, k)[i] + b.x(path, k)[i];
                    prop_assert!((sum.x(path, k)[i] - expected).abs() <= 1e-10 * expected.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn ensembles_are_reproducible_and_start_at_zero(
        steps in 1usize..30,
        paths in 1usize..50,
        seed in any::<u64>(),
    ) {
        let a = generate_ensemble(steps, paths, 1.0, seed).unwrap();
        let b = generate_ensemble(steps, paths, 1.0, seed).unwrap();
        for path in 0..paths {
            prop_assert_eq!(a.path(path), b.path(path));
            prop_assert_eq!(a.w(path, 0), 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tree_suite_is_deterministic_under_a_fixed_seed(seed in any::<u64>()) {
        let opts = TreeSuiteOptions {
            depth: 5,
            mid_level: 2,
            pairs: 5,
            perturbations: 4,
            probe_samples: 20,
            seed,
            bound_depths: vec![4, 5],
            ..TreeSuiteOptions::default()
        };
        let p = convex_problem(1, 2, seed, true);
        let a = run_tree_suite(&p, &opts).unwrap();
        let b = run_tree_suite(&p, &opts).unwrap();
        prop_assert_eq!(a.reports.len(), CheckKind::TREE.len());
        for (x, y) in a.reports.iter().zip(&b.reports) {
            prop_assert_eq!(x.outcome(), y.outcome());
            for (rx, ry) in x.residuals.iter().zip(&y.residuals) {
                prop_assert_eq!(rx.value.to_bits(), ry.value.to_bits());
            }
        }
        prop_assert!(a.acceptable(), "{}", a.summary());
    }
}

#[test]
fn zero_control_vector_is_the_additive_identity() {
    let ctx = OperatorContext::tree(TreeModel::build(4, &convex_problem(2, 1, 3, false)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = random_unit_control(&ctx, false, &mut rng);
    let zero = ControlVector::zeros(ctx.layout());
    assert_eq!(u.combine(1.0, &zero, 1.0).unwrap().values, u.values);
}
