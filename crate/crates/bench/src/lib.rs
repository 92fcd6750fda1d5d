//! Benchmark fixtures.

use zapstop::{random_finite_chain, FiniteChainModel, GbmRatioChain, MatrixBasis, RatioBasis};

/// Ten-state chain with a four-dimensional random basis containing `c_s`.
pub fn finite_instance() -> (FiniteChainModel, MatrixBasis) {
    let model = random_finite_chain(10, 18, 0.95).expect("valid chain");
    let basis = MatrixBasis::random_with_stop_cost(&model, 4, 2).expect("full-rank basis");
    (model, basis)
}

pub fn finance_instance() -> (GbmRatioChain, RatioBasis) {
    (GbmRatioChain::default(), RatioBasis::finance_default())
}
