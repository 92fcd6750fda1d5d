use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use zapstop::chain::sample_path;
use zapstop::features::s_theta_indicator;
use zapstop::gains::a_sample;
use zapstop::oracle::{
    b_of_theta, bellman_f, c_theta, exact_a, exact_sigma_psi, pi_norm, project, solve_theta_star, DEFAULT_PVI_TOL,
};
use zapstop::{random_finite_chain, FiniteChainModel, MatrixBasis, StoppingProblem};

fn instance() -> (FiniteChainModel, MatrixBasis) {
    let model = random_finite_chain(10, 18, 0.95).unwrap();
    let basis = MatrixBasis::random_with_stop_cost(&model, 4, 2).unwrap();
    (model, basis)
}

#[test]
fn sampled_a_matches_exact_a() {
    let (model, basis) = instance();
    let theta = solve_theta_star(&model, &basis, DEFAULT_PVI_TOL).unwrap();
    let path = sample_path(&model, 1_000_000, 21);
    let mut sum = DMatrix::<f64>::zeros(4, 4);
    for w in path.windows(2) {
        let next = w[1];
        let cont = s_theta_indicator(&theta, &basis, &next, model.stop_cost(&next)).unwrap() as f64;
        sum += a_sample(basis.row(w[0]), basis.row(next), cont, model.beta()).unwrap();
    }
    let mean = sum / (path.len() - 1) as f64;
    let exact = exact_a(&model, &basis, &theta).unwrap();
    let err = (mean - &exact).norm();
    assert!(err <= 1e-2, "Frobenius error {err}");
}

#[test]
fn b_is_lipschitz_within_envelope() {
    let (model, basis) = instance();
    let sigma = exact_sigma_psi(&model, &basis).unwrap();
    let bound = (1.0 + model.beta()) * sigma.trace();
    let mut rng = zapstop::rng::stream_rng(5, zapstop::rng::TRAIN_STREAM);
    use rand::Rng;
    for _ in 0..1000 {
        let t1 = DVector::from_fn(4, |_, _| rng.random_range(-4.0..4.0));
        let t2 = DVector::from_fn(4, |_, _| rng.random_range(-4.0..4.0));
        let num = (b_of_theta(&model, &basis, &t1).unwrap() - b_of_theta(&model, &basis, &t2).unwrap()).norm();
        let ratio = num / (&t1 - &t2).norm();
        assert!(ratio <= bound, "ratio {ratio} exceeds {bound}");
    }
}

fn chain_strategy() -> impl Strategy<Value = (FiniteChainModel, MatrixBasis)> {
    (
        2usize..15,
        any::<u64>(),
        prop::sample::select(vec![0.0, 0.5, 0.9, 0.999]),
        1usize..5,
    )
        .prop_map(|(n, seed, beta, d)| {
            let model = random_finite_chain(n, seed, beta).unwrap();
            let d = d.min(n).max(2);
            let basis = MatrixBasis::random_with_stop_cost(&model, d, seed ^ 1).unwrap();
            (model, basis)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dp_operator_contracts((model, _) in chain_strategy(), s in any::<u64>()) {
        let mut rng = zapstop::rng::stream_rng(s, 0);
        use rand::Rng;
        let n = model.n_states();
        let q1 = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let q2 = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let lhs = pi_norm(&model, &(bellman_f(&model, &q1).unwrap() - bellman_f(&model, &q2).unwrap()));
        prop_assert!(lhs <= model.beta() * pi_norm(&model, &(q1 - q2)) + 1e-12);
    }

    #[test]
    fn a_is_uniformly_negative_definite(
        (model, basis) in chain_strategy(),
        t in prop::collection::vec(-5.0..5.0f64, 4),
        v in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let d = basis.matrix().ncols();
        let theta = DVector::from_column_slice(&t[..d]);
        let v = DVector::from_column_slice(&v[..d]);
        let a = exact_a(&model, &basis, &theta).unwrap();
        let sigma = exact_sigma_psi(&model, &basis).unwrap();
        prop_assert!(-v.dot(&(&a * &v)) >= (1.0 - model.beta()) * v.dot(&(&sigma * &v)) - 1e-10);
    }

    #[test]
    fn b_is_the_projected_cost(
        (model, basis) in chain_strategy(),
        t in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        let theta = DVector::from_column_slice(&t[..basis.matrix().ncols()]);
        let lhs = b_of_theta(&model, &basis, &theta).unwrap();
        let rhs = project(&model, &basis, &c_theta(&model, &basis, &theta).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-10);
    }
}
