//! The matrix-gain Q-learning recursion
//!
//! ```text
//! d_{n+1}     = c(X_n) + beta min(c_s(X_{n+1}), Q^theta_n(X_{n+1})) - Q^theta_n(X_n)
//! theta_{n+1} = theta_n + alpha_{n+1} G_{n+1} psi(X_n) d_{n+1}
//! ```
//!
//! with `G = I`, `G = pinv(Sigma_hat)` (Kalman) or `G = -pinv(A_hat)` (Zap).
//! Within a step the gain estimate is updated before the parameter, so the
//! parameter update always sees `A_hat_{n+1}`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::StoppingProblem;
use crate::error::{Error, Result};
use crate::features::{dot, stops, FeatureMap};
use crate::gains::{GainState, GainStrategy, StepSizeSchedule, DEFAULT_REL_THRESHOLD};
use crate::rng::{stream_rng, TRAIN_STREAM};
use crate::{matrix_rows, VERSION};

/// Which iterations get a snapshot. `n = 0` and the final iterate are always
/// recorded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SnapshotPlan {
    /// Every `n = ceil(ratio^k)`.
    Geometric { ratio: f64 },
    /// Every multiple of `stride`.
    Every { stride: u64 },
    /// Only the endpoints.
    Final,
}

impl Default for SnapshotPlan {
    fn default() -> Self {
        Self::Geometric { ratio: 1.2 }
    }
}

impl SnapshotPlan {
    fn validate(&self) -> Result<()> {
        match *self {
            Self::Geometric { ratio } if ratio > 1.0 && ratio.is_finite() => Ok(()),
            Self::Every { stride } if stride >= 1 => Ok(()),
            Self::Final => Ok(()),
            other => Err(Error::Config(format!("invalid snapshot plan {other:?}"))),
        }
    }

    /// Sorted snapshot indices in `0..=n_iterations`.
    pub fn indices(&self, n_iterations: u64) -> Vec<u64> {
        let mut out = vec![0];
        match *self {
            Self::Geometric { ratio } => {
                let mut level = 1.0f64;
                loop {
                    let n = level.ceil() as u64;
                    if n >= n_iterations {
                        break;
                    }
                    if n > *out.last().unwrap() {
                        out.push(n);
                    }
                    level *= ratio;
                }
            }
            Self::Every { stride } => {
                out.extend((1..).map(|k| k * stride).take_while(|&n| n < n_iterations));
            }
            Self::Final => {}
        }
        if n_iterations > 0 {
            out.push(n_iterations);
        }
        out
    }
}

/// Everything that defines a learner run apart from the problem, the basis
/// and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSettings {
    pub gain: GainStrategy,
    /// Parameter step size.
    pub alpha: StepSizeSchedule,
    /// Gain-estimate step size: `gamma_n` for Zap, the `Sigma_hat` step for
    /// Kalman (harmonic when absent). Ignored by the identity gain.
    #[serde(default)]
    pub gamma: Option<StepSizeSchedule>,
    pub n_iterations: u64,
    /// `theta_0`; zero when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    /// `A_hat_0 = -scale I` (Zap) or `Sigma_hat_0 = scale I` (Kalman).
    #[serde(default = "one")]
    pub gain_init_scale: f64,
    #[serde(default = "default_rel")]
    pub rel_threshold: f64,
    /// Optional `delta` for pushing the spectrum of `A_hat` to
    /// `Re(lambda) <= -delta` before inversion.
    #[serde(default)]
    pub eigen_clamp: Option<f64>,
    /// Abort once `||theta|| exceeds this radius.
    #[serde(default)]
    pub divergence_radius: Option<f64>,
    #[serde(default)]
    pub snapshots: SnapshotPlan,
    /// Store the gain matrix alongside each snapshot.
    #[serde(default)]
    pub record_gain: bool,
}

fn one() -> f64 {
    1.0
}
fn default_rel() -> f64 {
    DEFAULT_REL_THRESHOLD
}

impl LearnerSettings {
    /// Zap with `alpha_n = 1/n`, `gamma_n = n^-0.85`.
    pub fn zap(n_iterations: u64) -> Self {
        Self {
            gain: GainStrategy::Zap,
            alpha: StepSizeSchedule::Harmonic,
            gamma: Some(StepSizeSchedule::Polynomial { rho: 0.85 }),
            n_iterations,
            theta0: None,
            gain_init_scale: 1.0,
            rel_threshold: DEFAULT_REL_THRESHOLD,
            eigen_clamp: None,
            divergence_radius: None,
            snapshots: SnapshotPlan::default(),
            record_gain: false,
        }
    }

    pub fn identity(alpha: StepSizeSchedule, n_iterations: u64) -> Self {
        Self {
            gain: GainStrategy::Identity,
            alpha,
            gamma: None,
            ..Self::zap(n_iterations)
        }
    }

    pub fn kalman(alpha: StepSizeSchedule, n_iterations: u64) -> Self {
        Self {
            gain: GainStrategy::Kalman,
            alpha,
            gamma: Some(StepSizeSchedule::Harmonic),
            ..Self::zap(n_iterations)
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_iterations < 1 {
            return Err(Error::Config("n_iterations must be at least 1".into()));
        }
        self.alpha.validate()?;
        match (self.gain, self.gamma) {
            (GainStrategy::Zap, None) => {
                return Err(Error::Config("zap needs a gamma schedule".into()));
            }
            (_, Some(g)) => g.validate()?,
            _ => {}
        }
        if let Some(t) = &self.theta0 {
            crate::error::check_dim(d, t.len())?;
        }
        if !(self.gain_init_scale > 0.0 && self.rel_threshold > 0.0) {
            return Err(Error::Config(
                "gain_init_scale and rel_threshold must be positive".into(),
            ));
        }
        self.snapshots.validate()
    }

    fn gain_schedule(&self) -> StepSizeSchedule {
        self.gamma.unwrap_or(StepSizeSchedule::Harmonic)
    }

    fn initial_gain(&self, d: usize) -> Result<GainState> {
        let eye = DMatrix::identity(d, d);
        match self.gain {
            GainStrategy::Identity => Ok(GainState::identity(d)),
            GainStrategy::Zap => GainState::zap(eye * -self.gain_init_scale, self.rel_threshold, self.eigen_clamp),
            GainStrategy::Kalman => GainState::kalman(eye * self.gain_init_scale, self.rel_threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub n: u64,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub completed_iterations: u64,
    /// Updates whose guarded inverse truncated a singular value.
    pub pinv_truncations: u64,
    pub max_theta_norm: f64,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

/// A seeded learner trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub seed: u64,
    pub settings: LearnerSettings,
    pub basis: String,
    /// Effective experiment configuration, when run from one.
    #[serde(default)]
    pub experiment: Option<serde_json::Value>,
    pub snapshots: Vec<Snapshot>,
    pub final_theta: Vec<f64>,
    /// Final `A_hat` or `Sigma_hat`.
    #[serde(default)]
    pub final_gain_matrix: Option<Vec<Vec<f64>>>,
    pub diagnostics: Diagnostics,
}

impl RunRecord {
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.final_theta)
    }

    pub fn final_gain(&self) -> Option<DMatrix<f64>> {
        self.final_gain_matrix.as_deref().map(crate::matrix_from_rows)
    }

    pub fn is_aborted(&self) -> bool {
        self.diagnostics.aborted.is_some()
    }
}

/// `d = c(x_n) + beta min(c_s(x_next), q_next) - q_n`.
#[inline]
pub fn temporal_difference(cost: f64, q_n: f64, q_next: f64, stop_cost_next: f64, beta: f64) -> f64 {
    cost + beta * stop_cost_next.min(q_next) - q_n
}

/// Temporal difference of the transition `x_n -> x_next` under `theta`.
pub fn td_term<P, F>(problem: &P, features: &F, theta: &DVector<f64>, x_n: &P::State, x_next: &P::State) -> Result<f64>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let q_n = crate::features::q_value(theta, features, x_n)?;
    let q_next = crate::features::q_value(theta, features, x_next)?;
    Ok(temporal_difference(
        problem.cost(x_n),
        q_n,
        q_next,
        problem.stop_cost(x_next),
        problem.beta(),
    ))
}

/// Runs the recursion for `settings.n_iterations` steps from the training
/// stream of `seed`. A non-finite or out-of-radius parameter ends the run
/// early and is reported in the record's diagnostics.
pub fn run_matrix_gain<P, F>(problem: &P, features: &F, settings: &LearnerSettings, seed: u64) -> Result<RunRecord>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let d = features.dim();
    settings.validate(d)?;
    let beta = problem.beta();
    let alpha = settings.alpha;
    let gamma = settings.gain_schedule();
    let mut gain = settings.initial_gain(d)?;
    let mut theta = settings.theta0.clone().unwrap_or_else(|| vec![0.0; d]);
    let plan = settings.snapshots.indices(settings.n_iterations);
    let mut next_snapshot = 0usize;
    let mut snapshots = Vec::with_capacity(plan.len());

    let snap = |n: u64, theta: &[f64], gain: &GainState| Snapshot {
        n,
        theta: theta.to_vec(),
        gain_matrix: (settings.record_gain && settings.gain != GainStrategy::Identity)
            .then(|| matrix_rows(gain.matrix())),
    };

    let mut rng = stream_rng(seed, TRAIN_STREAM);
    let mut x = problem.initial_state(&mut rng);
    let mut psi_n = vec![0.0; d];
    let mut psi_next = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut step = vec![0.0; d];
    features.eval_into(&x, &mut psi_n);
    let mut cost_n = problem.cost(&x);

    let mut max_norm = norm(&theta);
    let mut aborted = None;
    let mut completed = 0;

    if plan[0] == 0 {
        snapshots.push(snap(0, &theta, &gain));
        next_snapshot = 1;
    }

    for n in 0..settings.n_iterations {
        problem.advance(&mut x, &mut rng);
        features.eval_into(&x, &mut psi_next);
        let stop_cost_next = problem.stop_cost(&x);
        let q_n = dot(&theta, &psi_n);
        let q_next = dot(&theta, &psi_next);
        let td = temporal_difference(cost_n, q_n, q_next, stop_cost_next, beta);
        let k = n + 1;

        match settings.gain {
            GainStrategy::Identity => {}
            GainStrategy::Zap => {
                let cont = if stops(q_next, stop_cost_next) { 0.0 } else { beta };
                for ((wi, &pn), &pn1) in w.iter_mut().zip(&psi_n).zip(&psi_next) {
                    *wi = cont * pn1 - pn;
                }
                gain.update_zap_rank_one(&psi_n, &w, gamma.at(k));
            }
            GainStrategy::Kalman => gain.update_kalman_unchecked(&psi_n, gamma.at(k)),
        }

        let a = alpha.at(k) * td;
        for (s, &p) in w.iter_mut().zip(&psi_n) {
            *s = a * p;
        }
        gain.apply(&w, &mut step);
        for (t, s) in theta.iter_mut().zip(&step) {
            *t += s;
        }
        completed = k;

        let nrm = norm(&theta);
        if !nrm.is_finite() {
            aborted = Some(format!("non-finite parameter at n = {k}"));
            break;
        }
        max_norm = max_norm.max(nrm);
        if let Some(r) = settings.divergence_radius {
            if nrm > r {
                aborted = Some(format!("||theta|| = {nrm:e} exceeded radius {r:e} at n = {k}"));
                break;
            }
        }
        if next_snapshot < plan.len() && plan[next_snapshot] == k {
            snapshots.push(snap(k, &theta, &gain));
            next_snapshot += 1;
        }

        std::mem::swap(&mut psi_n, &mut psi_next);
        cost_n = problem.cost(&x);
    }

    if aborted.is_some() && theta.iter().all(|v| v.is_finite()) {
        snapshots.push(snap(completed, &theta, &gain));
    }

    Ok(RunRecord {
        version: VERSION.to_string(),
        seed,
        settings: settings.clone(),
        basis: features.label(),
        experiment: None,
        snapshots,
        final_gain_matrix: (settings.gain != GainStrategy::Identity).then(|| matrix_rows(gain.matrix())),
        final_theta: theta,
        diagnostics: Diagnostics {
            completed_iterations: completed,
            pinv_truncations: gain.truncations(),
            max_theta_norm: max_norm,
            aborted,
        },
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `replicas` independent runs with seeds `base_seed + m`, returned in
/// replica order.
pub fn run_replicas<P, F>(
    problem: &P,
    features: &F,
    settings: &LearnerSettings,
    replicas: usize,
    base_seed: u64,
) -> Result<Vec<RunRecord>>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    if replicas < 1 {
        return Err(Error::Config("need at least one replica".into()));
    }
    settings.validate(features.dim())?;
    (0..replicas as u64)
        .into_par_iter()
        .map(|m| run_matrix_gain(problem, features, settings, base_seed + m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{random_finite_chain, FiniteChainModel, StartState};
    use crate::features::MatrixBasis;
    use crate::gains::a_sample;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn snapshot_plans() {
        assert_eq!(SnapshotPlan::Final.indices(5), vec![0, 5]);
        assert_eq!(SnapshotPlan::Every { stride: 2 }.indices(7), vec![0, 2, 4, 6, 7]);
        let g = SnapshotPlan::Geometric { ratio: 1.2 }.indices(20);
        assert_eq!(g, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 11, 13, 16, 19, 20]);
        let big = SnapshotPlan::default().indices(2_000_000);
        assert!(big.windows(2).all(|w| w[0] < w[1]));
        assert!(big.len() < 100);
    }

    #[test]
    fn td_examples() {
        assert_eq!(temporal_difference(0.0, 0.0, 0.0, -2.0, 0.9), 0.9 * -2.0);
        assert_eq!(temporal_difference(0.0, 0.0, 0.0, 3.0, 0.9), 0.0);
        assert_eq!(temporal_difference(1.5, 0.7, 100.0, -4.0, 0.0), 1.5 - 0.7);
    }

    fn two_cycle() -> FiniteChainModel {
        FiniteChainModel::new(
            dmatrix![0.0, 1.0; 1.0, 0.0],
            dvector![0.3, 0.1],
            dvector![1.0, 0.2],
            0.9,
        )
        .unwrap()
        .with_start(StartState::Fixed(0))
        .unwrap()
    }

    #[test]
    fn single_step_unrolls_by_hand() {
        let m = two_cycle();
        let basis = MatrixBasis::from_rows(&[vec![1.0, 0.5], vec![1.0, -1.0]], "b").unwrap();
        let theta0 = vec![0.2, 0.4];
        for gain in [GainStrategy::Identity, GainStrategy::Zap, GainStrategy::Kalman] {
            let mut s = LearnerSettings::zap(1);
            s.gain = gain;
            s.alpha = StepSizeSchedule::ScaledHarmonic { g: 0.5 };
            s.theta0 = Some(theta0.clone());
            let rec = run_matrix_gain(&m, &basis, &s, 1).unwrap();

            let t0 = DVector::from_vec(theta0.clone());
            let psi0 = dvector![1.0, 0.5];
            let psi1 = dvector![1.0, -1.0];
            let d = 0.3 + 0.9 * 0.2f64.min(t0.dot(&psi1)) - t0.dot(&psi0);
            let g = match gain {
                GainStrategy::Identity => DMatrix::identity(2, 2),
                GainStrategy::Zap => {
                    // gamma_1 = 1: A_hat_1 is the single sample.
                    let cont = if t0.dot(&psi1) < 0.2 { 1.0 } else { 0.0 };
                    let a1 = a_sample(psi0.as_slice(), psi1.as_slice(), cont, 0.9).unwrap();
                    -crate::gains::guarded_pinv(&a1, 1e-8)
                }
                GainStrategy::Kalman => crate::gains::guarded_pinv(&(&psi0 * psi0.transpose()), 1e-8),
            };
            let expect = &t0 + g * &psi0 * (0.5 * d);
            let got = rec.theta();
            assert!((got - expect).amax() < 1e-12, "{gain:?}");
            assert_eq!(rec.snapshots.len(), 2);
            assert_eq!(rec.snapshots[1].n, 1);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let m = random_finite_chain(5, 2, 0.9).unwrap();
        let basis = MatrixBasis::tabular(5);
        let s = LearnerSettings::zap(5000);
        let a = run_matrix_gain(&m, &basis, &s, 3).unwrap();
        let b = run_matrix_gain(&m, &basis, &s, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn replicas_are_ordered_and_distinct() {
        let m = random_finite_chain(5, 2, 0.9).unwrap();
        let basis = MatrixBasis::tabular(5);
        let s = LearnerSettings::zap(2000);
        let reps = run_replicas(&m, &basis, &s, 4, 10).unwrap();
        assert_eq!(reps.len(), 4);
        for (i, r) in reps.iter().enumerate() {
            assert_eq!(r.seed, 10 + i as u64);
        }
        assert_eq!(reps[0], run_matrix_gain(&m, &basis, &s, 10).unwrap());
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(reps[i].final_theta, reps[j].final_theta);
            }
        }
        assert!(run_replicas(&m, &basis, &s, 0, 1).is_err());
    }

    #[test]
    fn divergence_is_recorded() {
        let m = random_finite_chain(4, 1, 0.9).unwrap();
        let basis = MatrixBasis::from_rows(&[vec![50.0], vec![40.0], vec![60.0], vec![30.0]], "huge").unwrap();
        let mut s = LearnerSettings::identity(StepSizeSchedule::ScaledHarmonic { g: 10.0 }, 1000);
        s.divergence_radius = Some(1e6);
        let rec = run_matrix_gain(&m, &basis, &s, 1).unwrap();
        assert!(rec.is_aborted());
        assert!(rec.diagnostics.completed_iterations < 1000);
        assert!(rec.final_theta.iter().all(|v| v.is_finite()) || rec.diagnostics.aborted.is_some());
        let last = rec.snapshots.last().unwrap();
        assert_eq!(last.n, rec.diagnostics.completed_iterations);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let m = random_finite_chain(4, 1, 0.9).unwrap();
        let basis = MatrixBasis::tabular(4);
        let mut s = LearnerSettings::zap(0);
        assert!(run_matrix_gain(&m, &basis, &s, 1).is_err());
        s.n_iterations = 10;
        s.gamma = None;
        assert!(run_matrix_gain(&m, &basis, &s, 1).is_err());
        let mut s = LearnerSettings::zap(10);
        s.theta0 = Some(vec![0.0; 3]);
        assert!(run_matrix_gain(&m, &basis, &s, 1).is_err());
    }
}
