use nalgebra::{DMatrix, DVector};
use zapstop::chain::sample_path;
use zapstop::{random_finite_chain, FeatureMap, GbmRatioChain, GbmState, MarkovChain, RatioBasis, StoppingProblem};

#[test]
fn occupation_frequencies_match_stationary_law() {
    let model = random_finite_chain(5, 7, 0.9).unwrap();
    let path = sample_path(&model, 10_000_000, 7);
    let mut counts = [0u64; 5];
    for &x in &path {
        counts[x] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let freq = c as f64 / path.len() as f64;
        assert!(
            (freq - model.stationary()[i]).abs() <= 1e-3,
            "state {i}: {freq} vs {}",
            model.stationary()[i]
        );
    }
}

#[test]
fn finance_ratios_track_prices() {
    let chain = GbmRatioChain {
        window: 8,
        ..GbmRatioChain::default()
    };
    let mut rng = zapstop::rng::stream_rng(3, zapstop::rng::TRAIN_STREAM);
    let mut x = chain.initial_state(&mut rng);
    // Rebuild the price history from the ratios and check it stays consistent
    // step by step: the new ratio vector is the old one shifted and rescaled.
    for _ in 0..10_000 {
        let before = x.ratios().to_vec();
        chain.advance(&mut x, &mut rng);
        let after = x.ratios();
        let scale = 1.0 / before[0];
        for i in 0..before.len() - 1 {
            let expected = before[i + 1] * scale;
            assert!((after[i] - expected).abs() <= 1e-12 * expected.max(1.0));
        }
        assert_eq!(chain.stop_cost(&x), -x.reward());
        assert_eq!(x.reward(), after[after.len() - 1]);
    }
}

#[test]
fn finance_basis_spans_the_stop_cost() {
    let chain = GbmRatioChain::default();
    let basis = RatioBasis::finance_default();
    let path = sample_path(&chain, 10_000, 11);
    let d = FeatureMap::<GbmState>::dim(&basis);
    let mut psi = DMatrix::zeros(path.len(), d);
    let mut target = DVector::zeros(path.len());
    let mut row = vec![0.0; d];
    for (k, x) in path.iter().enumerate() {
        basis.eval_into(x, &mut row);
        psi.row_mut(k).copy_from_slice(&row);
        target[k] = chain.stop_cost(x) - 1.0;
    }
    let theta = psi.clone().svd(true, true).solve(&target, 1e-12).unwrap();
    let residual = (&psi * theta - target).amax();
    assert!(residual <= 1e-10, "residual {residual}");
}

#[test]
fn finance_gram_matrix_is_nonsingular() {
    let chain = GbmRatioChain::default();
    let basis = RatioBasis::finance_default();
    let path: Vec<GbmState> = sample_path(&chain, 100_000, 12);
    let d = FeatureMap::<GbmState>::dim(&basis);
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut row = vec![0.0; d];
    for x in &path {
        basis.eval_into(x, &mut row);
        let v = DVector::from_column_slice(&row);
        gram += &v * v.transpose();
    }
    gram /= path.len() as f64;
    let smallest = gram.singular_values().min();
    assert!(smallest > 0.0, "smallest singular value {smallest}");
}

#[test]
fn paths_are_pure_functions_of_the_seed() {
    let chain = GbmRatioChain::default();
    let a = sample_path(&chain, 500, 4);
    let b = sample_path(&chain, 500, 4);
    assert_eq!(a, b);
    let model = random_finite_chain(12, 3, 0.9).unwrap();
    assert_eq!(sample_path(&model, 1000, 4), sample_path(&model, 1000, 4));
    assert_ne!(sample_path(&model, 1000, 4), sample_path(&model, 1000, 5));
}
