mod common;

use proptest::prelude::*;
use sparse_lpv::estimators::qp::{solve_qp, QpOptions};

use common::{brute_force_qp, random_qp, rng};

#[test]
fn matches_active_set_enumeration_on_tiny_instances() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 10 {
        let mut r = rng(seed);
        seed += 1;
        let p = random_qp(&mut r, 3, 5);
        let Some((_, f_ref)) = brute_force_qp(&p) else { continue };
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert!((sol.objective - f_ref).abs() < 1e-6 * (1.0 + f_ref.abs()), "seed {seed}: {} vs {f_ref}", sol.objective);
        assert!(sol.diagnostics.max_residual() < 1e-6);
        checked += 1;
    }
}

#[test]
fn unconstrained_problem_hits_the_linear_solve() {
    let mut r = rng(11);
    let mut p = random_qp(&mut r, 6, 0);
    p.a = nalgebra::DMatrix::zeros(0, 6);
    let sol = solve_qp(&p, &QpOptions::default()).unwrap();
    let x = p.h.clone().cholesky().unwrap().solve(&(-&p.g));
    assert!((sol.x - x).amax() < 1e-8);
}

#[test]
fn infeasible_problem_is_reported() {
    let mut r = rng(5);
    let mut p = random_qp(&mut r, 2, 2);
    p.a = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
    p.b = nalgebra::DVector::from_vec(vec![-1.0, -1.0]);
    assert!(solve_qp(&p, &QpOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kkt_residuals_are_small(seed in 0u64..100_000, n in 1usize..12, m in 0usize..20) {
        let mut r = rng(seed);
        let mut p = random_qp(&mut r, n, m);
        p.b.iter_mut().for_each(|v| *v = v.abs() + 0.1);
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        prop_assert!(sol.diagnostics.max_residual() < 1e-6, "{:?}", sol.diagnostics);
    }
}
