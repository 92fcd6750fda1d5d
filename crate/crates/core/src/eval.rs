//! Monte-Carlo evaluation of the policy `stop iff c_s(x) <= Q^theta(x)`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{Convention, StoppingProblem};
use crate::error::{check_dim, Error, Result};
use crate::features::{dot, stops, FeatureMap};
use crate::rng::{stream_rng, EVAL_STREAM_BASE};

/// Default discount-truncation tolerance.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-6;

/// Smallest `T` with `beta^T < tol`.
pub fn default_horizon(beta: f64, tol: f64) -> usize {
    if beta <= 0.0 {
        return 1;
    }
    ((tol.ln() / beta.ln()).floor() as usize + 1).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueEstimate {
    /// In the problem's convention: expected cost, or expected reward.
    pub mean: f64,
    pub std_error: f64,
    pub n_runs: usize,
    pub horizon: usize,
    /// Paths that reached the horizon without stopping; they score 0 from
    /// there on.
    pub truncated_paths: usize,
    /// `beta^horizon * max |c_s|` over states visited by truncated paths.
    pub truncation_bound: f64,
    pub convention: Convention,
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        }
    }
}

struct PathOutcome {
    cost: f64,
    truncated: bool,
    max_stop_cost: f64,
}

fn simulate_path<P, F>(
    problem: &P,
    features: &F,
    theta: &[f64],
    x0: &P::State,
    horizon: usize,
    stream: u64,
    seed: u64,
) -> PathOutcome
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let beta = problem.beta();
    let mut rng = stream_rng(seed, stream);
    let mut psi = vec![0.0; features.dim()];
    let mut x = x0.clone();
    let mut discount = 1.0;
    let mut cost = 0.0;
    let mut max_stop_cost = 0.0f64;
    for _ in 0..horizon {
        features.eval_into(&x, &mut psi);
        let cs = problem.stop_cost(&x);
        max_stop_cost = max_stop_cost.max(cs.abs());
        if stops(dot(theta, &psi), cs) {
            return PathOutcome {
                cost: cost + discount * cs,
                truncated: false,
                max_stop_cost,
            };
        }
        cost += discount * problem.cost(&x);
        discount *= beta;
        problem.advance(&mut x, &mut rng);
    }
    max_stop_cost = max_stop_cost.max(problem.stop_cost(&x).abs());
    PathOutcome {
        cost,
        truncated: true,
        max_stop_cost,
    }
}

/// Estimates the value of the policy of `theta` from `x0` over `n_runs`
/// independent paths. Path `k` uses its own evaluation stream of `seed`, so
/// the estimate does not depend on the thread count.
pub fn mc_policy_value<P, F>(
    problem: &P,
    features: &F,
    theta: &DVector<f64>,
    x0: &P::State,
    n_runs: usize,
    horizon: Option<usize>,
    seed: u64,
) -> Result<PolicyValueEstimate>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    if n_runs < 1 {
        return Err(Error::InsufficientSamples("n_runs must be at least 1".into()));
    }
    check_dim(features.dim(), theta.len())?;
    let horizon = horizon.unwrap_or_else(|| default_horizon(problem.beta(), DEFAULT_TRUNCATION_TOL));
    let th = theta.as_slice();
    let outcomes: Vec<PathOutcome> = (0..n_runs as u64)
        .into_par_iter()
        .map(|k| simulate_path(problem, features, th, x0, horizon, EVAL_STREAM_BASE + k, seed))
        .collect();
    let sign = match problem.convention() {
        Convention::Cost => 1.0,
        Convention::Reward => -1.0,
    };
    let mut acc = Welford::default();
    let mut truncated = 0;
    let mut bound = 0.0f64;
    for o in &outcomes {
        acc.push(sign * o.cost);
        if o.truncated {
            truncated += 1;
            bound = bound.max(o.max_stop_cost);
        }
    }
    Ok(PolicyValueEstimate {
        mean: acc.mean,
        std_error: acc.std_error(),
        n_runs,
        horizon,
        truncated_paths: truncated,
        truncation_bound: problem.beta().powi(horizon.min(i32::MAX as usize) as i32) * bound,
        convention: problem.convention(),
    })
}

/// Equal-width histogram; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// A sample with a single distinct value gives a single zero-width bin.
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins < 1 {
            return Err(Error::InsufficientSamples(
                "histogram needs values and at least one bin".into(),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("histogram value".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            return Ok(Self {
                edges: vec![lo, hi],
                counts: vec![values.len() as u64],
            });
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(lo, hi, count)` per bin.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (self.edges[i], self.edges[i + 1], c))
    }
}

/// Median of a nonempty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub estimates: Vec<PolicyValueEstimate>,
    pub histogram: Histogram,
    pub median: f64,
}

/// Evaluates every parameter with the same evaluation seed and bins the
/// resulting means.
#[allow(clippy::too_many_arguments)]
pub fn reward_histogram<P, F>(
    thetas: &[DVector<f64>],
    problem: &P,
    features: &F,
    x0: &P::State,
    n_runs: usize,
    horizon: Option<usize>,
    seed: u64,
    bins: usize,
) -> Result<RewardSummary>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    if thetas.is_empty() {
        return Err(Error::InsufficientSamples("no parameters to evaluate".into()));
    }
    let estimates = thetas
        .iter()
        .map(|th| mc_policy_value(problem, features, th, x0, n_runs, horizon, seed))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = estimates.iter().map(|e| e.mean).collect();
    Ok(RewardSummary {
        histogram: Histogram::from_values(&means, bins)?,
        median: median(&means).unwrap_or(f64::NAN),
        estimates,
    })
}
