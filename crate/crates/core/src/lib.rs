//! Matrix-gain Q-learning for discounted optimal stopping.
//!
//! The crate covers finite Markov chains with exact oracles, a geometric
//! Brownian motion price-ratio chain, the identity, Kalman and Zap gain
//! recursions, asymptotic covariance analysis and Monte-Carlo policy
//! evaluation.

pub mod analysis;
pub mod chain;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod gains;
pub mod learner;
pub mod oracle;
pub mod pipeline;
pub mod rng;

use nalgebra::DMatrix;

pub use analysis::CovarianceReport;
pub use chain::{
    random_finite_chain, Convention, FiniteChainDoc, FiniteChainModel, GbmRatioChain, GbmState, MarkovChain,
    StartState, StoppingProblem,
};
pub use config::{Experiment, ExperimentConfig};
pub use error::{Error, Result};
pub use eval::{mc_policy_value, PolicyValueEstimate};
pub use features::{policy, q_value, Decision, FeatureMap, MatrixBasis, Primitive, RatioBasis, RatioBasisDoc};
pub use gains::{GainState, GainStrategy, StepSizeSchedule};
pub use learner::{run_matrix_gain, run_replicas, LearnerSettings, RunRecord, SnapshotPlan};
pub use oracle::ExactQuantities;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Row-major copy of a matrix, for serialization.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Inverse of [`matrix_rows`]. Rows must have equal length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}
