//! End-to-end steps shared by the command line and the acceptance suite.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    effective_gain, empirical_scaled_covariance, fit_log_slope, noise_covariance, ode_integrate, sa_vs_ode_deviation,
    sample_mean_field, scaled_errors, start_grid, CovarianceReport, DeviationProfile, FiniteMeanField, OdeSettings,
};
use crate::chain::{FiniteChainModel, StoppingProblem};
use crate::config::{AnalysisSpec, EvalSpec, Experiment};
use crate::error::{Error, Result};
use crate::eval::{reward_histogram, Histogram, RewardSummary};
use crate::features::MatrixBasis;
use crate::learner::{run_replicas, LearnerSettings, RunRecord};
use crate::oracle::{
    b_of_theta, bellman_f, c_theta, check_full_rank, exact_a, exact_sigma_psi, galerkin_residual, pi_norm, project,
    solve_theta_star, DEFAULT_PVI_TOL,
};
use crate::rng::{stream_rng, INSTANCE_STREAM};

/// Runs `replicas` seeded learners on a resolved experiment.
pub fn train(exp: &Experiment, settings: &LearnerSettings, replicas: usize, seed: u64) -> Result<Vec<RunRecord>> {
    match exp {
        Experiment::Finite { model, basis } => run_replicas(model, basis, settings, replicas, seed),
        Experiment::Finance { chain, basis } => run_replicas(chain, basis, settings, replicas, seed),
    }
}

/// Final parameters of the records, in order.
pub fn final_thetas(records: &[RunRecord]) -> Vec<DVector<f64>> {
    records.iter().map(RunRecord::theta).collect()
}

/// Policy values of every record's final parameter.
pub fn evaluate(exp: &Experiment, records: &[RunRecord], spec: &EvalSpec) -> Result<RewardSummary> {
    if records.is_empty() {
        return Err(Error::InsufficientSamples("no run records".into()));
    }
    let thetas = final_thetas(records);
    match exp {
        Experiment::Finite { model, basis } => {
            if spec.start >= model.n_states() {
                return Err(Error::Config(format!("eval.start = {} is not a state", spec.start)));
            }
            reward_histogram(
                &thetas,
                model,
                basis,
                &spec.start,
                spec.n_runs,
                spec.horizon,
                spec.seed,
                spec.bins,
            )
        }
        Experiment::Finance { chain, basis } => reward_histogram(
            &thetas,
            chain,
            basis,
            &chain.flat_state(),
            spec.n_runs,
            spec.horizon,
            spec.seed,
            spec.bins,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaSource {
    /// Exact Galerkin fixed point.
    Oracle,
    /// Final parameter of a reference run.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub theta_star: Vec<f64>,
    pub theta_source: ThetaSource,
    /// `A(theta*)`, row-major: exact on finite chains, sampled otherwise.
    pub a_star: Vec<Vec<f64>>,
    pub sigma_eps: Vec<Vec<f64>>,
    /// Records excluded because they aborted.
    pub aborted_records: usize,
    pub report: CovarianceReport,
    /// `sqrt(N) (theta_N(coord) - theta*(coord))` per replica.
    pub coord: usize,
    pub scaled_errors: Vec<f64>,
    pub histogram: Histogram,
}

/// Compares the spread of the records' final parameters with the
/// asymptotic covariance predicted for their gain. `reference` replaces the
/// exact fixed point, and is required for the finance chain.
pub fn analyze(
    exp: &Experiment,
    records: &[RunRecord],
    spec: &AnalysisSpec,
    reference: Option<&DVector<f64>>,
) -> Result<AnalysisOutput> {
    let usable: Vec<&RunRecord> = records.iter().filter(|r| !r.is_aborted()).collect();
    if usable.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "covariance analysis needs at least 2 completed replicas, got {}",
            usable.len()
        )));
    }
    let settings = &usable[0].settings;
    if usable.iter().any(|r| {
        r.settings.gain != settings.gain
            || r.settings.alpha != settings.alpha
            || r.settings.n_iterations != settings.n_iterations
    }) {
        return Err(Error::Config("records come from different configurations".into()));
    }
    let n = settings.n_iterations;
    let d = exp.dim();

    let (theta_star, source, a, sigma_psi, sigma_eps) = match exp {
        Experiment::Finite { model, basis } => {
            let (theta, source) = match reference {
                Some(t) => (t.clone(), ThetaSource::Reference),
                None => (solve_theta_star(model, basis, DEFAULT_PVI_TOL)?, ThetaSource::Oracle),
            };
            let a = exact_a(model, basis, &theta)?;
            let sp = exact_sigma_psi(model, basis)?;
            let se = noise_covariance(model, basis, &theta, spec.noise_samples, spec.batches, spec.seed)?;
            (theta, source, a, sp, se)
        }
        Experiment::Finance { chain, basis } => {
            let theta = reference
                .cloned()
                .ok_or_else(|| Error::Config("finance analysis needs a reference run for theta*".into()))?;
            let f = sample_mean_field(chain, basis, &theta, spec.noise_samples, spec.batches, spec.seed)?;
            (
                theta,
                ThetaSource::Reference,
                f.a_matrix(),
                f.sigma_psi_matrix(),
                f.sigma_eps_matrix(),
            )
        }
    };
    crate::error::check_dim(d, theta_star.len())?;
    if spec.coord >= d {
        return Err(Error::Config(format!("analysis.coord = {} but d = {d}", spec.coord)));
    }

    let thetas: Vec<DVector<f64>> = usable.iter().map(|r| r.theta()).collect();
    let empirical = empirical_scaled_covariance(&thetas, &theta_star, n)?;
    let (gain, mut gain_note) = match effective_gain(settings.gain, &settings.alpha, &a, &sigma_psi) {
        Ok(g) => (g, None),
        Err(e) => (None, Some(format!("effective gain unavailable: {e}"))),
    };
    let mut report = CovarianceReport::build(gain.as_ref(), &a, &sigma_eps, &empirical, usable.len(), n);
    report.notes.extend(gain_note.take());
    let errors = scaled_errors(&thetas, &theta_star, n, spec.coord);
    Ok(AnalysisOutput {
        histogram: Histogram::from_values(&errors, spec.bins)?,
        theta_star: theta_star.iter().copied().collect(),
        theta_source: source,
        a_star: crate::matrix_rows(&a),
        sigma_eps: crate::matrix_rows(&sigma_eps),
        aborted_records: records.len() - usable.len(),
        report,
        coord: spec.coord,
        scaled_errors: errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeCheckOutput {
    pub profile: DeviationProfile,
    /// Last deviation over first deviation.
    pub deviation_ratio: f64,
    /// Fitted slope of `ln ||b(w(t)) - b*||` on the ODE from `theta_0`.
    pub b_decay_rate: Option<f64>,
    pub b_horizon: f64,
}

/// Measures how closely a Zap run on a finite chain follows its mean ODE.
pub fn ode_check(
    model: &FiniteChainModel,
    basis: &MatrixBasis,
    record: &RunRecord,
    spec: &AnalysisSpec,
    b_horizon: f64,
) -> Result<OdeCheckOutput> {
    let field = FiniteMeanField::new(model, basis)?;
    let settings = OdeSettings::default();
    let alpha = record.settings.alpha;
    let starts = start_grid(record, &alpha, spec.ode_horizon, spec.ode_starts)?;
    let profile = sa_vs_ode_deviation(record, &alpha, &field, spec.ode_horizon, &starts, &settings)?;
    let first = profile.deviations[0];
    let last = *profile.deviations.last().unwrap();
    let w0 = DVector::from_column_slice(&record.snapshots[0].theta);
    let traj = ode_integrate(&field, &w0, b_horizon, &settings)?;
    Ok(OdeCheckOutput {
        deviation_ratio: if first > 0.0 { last / first } else { 0.0 },
        b_decay_rate: fit_log_slope(&traj.t, &traj.b_residuals()),
        b_horizon,
        profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub n_states: usize,
    pub dim: usize,
    pub beta: f64,
    pub checks: Vec<CheckResult>,
    /// Largest observed `||FQ - FQ'||_pi / ||Q - Q'||_pi`.
    pub contraction_ratio: f64,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Property checks of the exact oracle on one chain and basis: basis rank,
/// contraction of the Bellman operator, the negative-definiteness bound on
/// `A(theta)`, the Galerkin residual of the fixed point and the projection
/// identity `b(theta) = E_pi[c^theta psi]`.
pub fn oracle_check(model: &FiniteChainModel, basis: &MatrixBasis, n_samples: usize, seed: u64) -> OracleCheckReport {
    let beta = model.beta();
    let n = model.n_states();
    let d = basis.matrix().ncols();
    let mut rng = stream_rng(seed, INSTANCE_STREAM);
    let mut checks = Vec::new();
    let mut check = |name: &str, worst: f64, tolerance: f64| {
        checks.push(CheckResult {
            name: name.into(),
            passed: worst <= tolerance,
            worst,
            tolerance,
        });
    };

    let sigma = match check_full_rank(model, basis) {
        Ok(s) => {
            check("basis_rank", 0.0, 0.0);
            Some(s)
        }
        Err(Error::RankDeficientBasis(smin)) => {
            check("basis_rank", 1.0 / smin.max(f64::MIN_POSITIVE), 0.0);
            None
        }
        Err(_) => {
            check("basis_rank", f64::INFINITY, 0.0);
            None
        }
    };

    let mut ratio = 0.0f64;
    let mut slack = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let q1 = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let q2 = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let (Ok(f1), Ok(f2)) = (bellman_f(model, &q1), bellman_f(model, &q2)) else {
            continue;
        };
        let lhs = pi_norm(model, &(f1 - f2));
        let rhs = pi_norm(model, &(&q1 - &q2));
        ratio = ratio.max(lhs / rhs);
        slack = slack.max(lhs - beta * rhs);
    }
    check("contraction", slack, 1e-12);

    if let Some(sigma) = sigma {
        let mut worst = f64::NEG_INFINITY;
        let mut proj = 0.0f64;
        for _ in 0..n_samples {
            let theta = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            if let Ok(a) = exact_a(model, basis, &theta) {
                let lhs = -(v.dot(&(&a * &v)));
                let rhs = (1.0 - beta) * v.dot(&(&sigma * &v));
                worst = worst.max(rhs - lhs);
            }
            if let (Ok(b), Ok(c)) = (b_of_theta(model, basis, &theta), c_theta(model, basis, &theta)) {
                proj = proj.max((b - project(model, basis, &c)).norm());
            }
        }
        check("negative_definite", worst, 1e-10);
        check("projection_identity", proj, 1e-10);
        let galerkin = solve_theta_star(model, basis, DEFAULT_PVI_TOL)
            .and_then(|t| galerkin_residual(model, basis, &t))
            .map_or(f64::INFINITY, |r| r.amax());
        check("galerkin_residual", galerkin, 1e-8);
    }
    OracleCheckReport {
        n_states: n,
        dim: d,
        beta,
        checks,
        contraction_ratio: ratio,
    }
}

/// `Sigma_psi` of a finite experiment, or `None` for finance.
pub fn exact_feature_covariance(exp: &Experiment) -> Result<Option<DMatrix<f64>>> {
    match exp {
        Experiment::Finite { model, basis } => exact_sigma_psi(model, basis).map(Some),
        Experiment::Finance { .. } => Ok(None),
    }
}
