//! Asymptotic covariance and ODE tracking.
//!
//! For a gain whose limit is `G`, the scaled error `sqrt(n) (theta_n - theta*)`
//! has covariance solving
//!
//! ```text
//! (G A + I/2) Sigma + Sigma (G A + I/2)^T + G Sigma_eps G^T = 0
//! ```
//!
//! which is finite only when every eigenvalue of `G A + I/2` has negative
//! real part. The minimum over gains is `A^-1 Sigma_eps A^-T`, attained at
//! `G = -A^-1`.
//!
//! The Zap mean flow is `dw/dt = -A(w)^-1 (b* - b(w))`, along which
//! `db/dt = b* - b`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{FiniteChainModel, StoppingProblem};
use crate::error::{check_dim, Error, Result};
use crate::features::{dot, stops, FeatureMap, MatrixBasis};
use crate::gains::{GainStrategy, StepSizeSchedule};
use crate::learner::{temporal_difference, RunRecord};
use crate::matrix_rows;
use crate::oracle::{b_of_theta, exact_a, exact_b_star};
use crate::rng::{stream_rng, NOISE_STREAM};

/// Threshold above which `cond(A)` is flagged in reports.
pub const COND_FLAG: f64 = 1e3;

/// Largest real part among the eigenvalues of `m`.
pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// 2-norm condition number.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

fn check_square(m: &DMatrix<f64>, d: usize) -> Result<()> {
    check_dim(d, m.nrows())?;
    check_dim(d, m.ncols())
}

/// Solves the Lyapunov equation for the asymptotic covariance of gain `g`.
pub fn lyapunov_covariance(g: &DMatrix<f64>, a: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    check_square(g, d)?;
    check_square(a, d)?;
    check_square(sigma_eps, d)?;
    let m = g * a + DMatrix::identity(d, d) * 0.5;
    let top = max_real_eigenvalue(&m);
    if top >= 0.0 {
        return Err(Error::InfiniteCovariance(top));
    }
    // Column-major vec: vec(M S) = (I kron M) vec S, vec(S M^T) = (M kron I) vec S.
    let eye = DMatrix::<f64>::identity(d, d);
    let k = eye.kronecker(&m) + m.kronecker(&eye);
    let q = g * sigma_eps * g.transpose();
    let rhs = -DVector::from_column_slice(q.as_slice());
    let vec = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov system".into()))?;
    let sigma = DMatrix::from_column_slice(d, d, vec.as_slice());
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Left-hand side of the Lyapunov equation at `sigma`.
pub fn lyapunov_residual(
    g: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = a.nrows();
    let m = g * a + DMatrix::identity(d, d) * 0.5;
    &m * sigma + sigma * m.transpose() + g * sigma_eps * g.transpose()
}

/// `A^-1 Sigma_eps A^-T`.
pub fn optimal_covariance(a: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    check_square(a, d)?;
    check_square(sigma_eps, d)?;
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("A(theta*)".into()))?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular("A(theta*)".into()));
    }
    let s = &inv * sigma_eps * inv.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// The limiting gain `lim n alpha_n G_n` of a strategy: `g I`, `g Sigma_psi^-1`
/// or `-g A^-1`. `None` for schedules with `n alpha_n -> infinity`.
pub fn effective_gain(
    strategy: GainStrategy,
    alpha: &StepSizeSchedule,
    a: &DMatrix<f64>,
    sigma_psi: &DMatrix<f64>,
) -> Result<Option<DMatrix<f64>>> {
    let Some(g) = alpha.asymptotic_gain() else {
        return Ok(None);
    };
    let d = a.nrows();
    let base = match strategy {
        GainStrategy::Identity => DMatrix::identity(d, d),
        GainStrategy::Kalman => sigma_psi
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("Sigma_psi".into()))?,
        GainStrategy::Zap => -a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("A(theta*)".into()))?,
    };
    Ok(Some(base * g))
}

/// Sequence of `d`-vectors stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    dim: usize,
    data: Vec<f64>,
}

impl NoiseSample {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut s = Self::new(dim);
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        check_dim(self.dim, v.len())?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("noise sample".into()));
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for v in self.iter() {
            for (mi, x) in m.iter_mut().zip(v) {
                *mi += x;
            }
        }
        m / self.len().max(1) as f64
    }
}

/// `ceil(sqrt(t))`.
pub fn default_batch_count(t: usize) -> usize {
    (t as f64).sqrt().ceil() as usize
}

/// Streaming batch-means estimator of the long-run covariance. Samples past
/// the last full batch are ignored.
#[derive(Debug, Clone)]
pub struct BatchMeans {
    dim: usize,
    batch_len: usize,
    n_batches: usize,
    in_batch: usize,
    current: Vec<f64>,
    sums: Vec<f64>,
}

impl BatchMeans {
    pub fn new(dim: usize, total: usize, n_batches: usize) -> Result<Self> {
        if n_batches < 2 || total < n_batches {
            return Err(Error::InsufficientSamples(format!(
                "batch means needs T >= n_batches >= 2 (T = {total}, n_batches = {n_batches})"
            )));
        }
        Ok(Self {
            dim,
            batch_len: total / n_batches,
            n_batches,
            in_batch: 0,
            current: vec![0.0; dim],
            sums: Vec::with_capacity(dim * n_batches),
        })
    }

    #[inline]
    pub fn push(&mut self, v: &[f64]) {
        if self.sums.len() == self.dim * self.n_batches {
            return;
        }
        for (c, x) in self.current.iter_mut().zip(v) {
            *c += x;
        }
        self.in_batch += 1;
        if self.in_batch == self.batch_len {
            self.sums.extend_from_slice(&self.current);
            self.current.iter_mut().for_each(|c| *c = 0.0);
            self.in_batch = 0;
        }
    }

    /// Sample covariance of `S_k / sqrt(L)` over the batches, centered at
    /// their mean.
    pub fn finish(&self) -> Result<DMatrix<f64>> {
        let k = self.sums.len() / self.dim.max(1);
        if k < self.n_batches {
            return Err(Error::InsufficientSamples(format!(
                "only {k} of {} batches filled",
                self.n_batches
            )));
        }
        let scale = 1.0 / (self.batch_len as f64).sqrt();
        let scaled = DMatrix::from_column_slice(self.dim, k, &self.sums) * scale;
        let mean = scaled.column_mean();
        let centered = scaled.map_with_location(|i, _, v| v - mean[i]);
        let cov = &centered * centered.transpose() / (k - 1) as f64;
        Ok((&cov + cov.transpose()) * 0.5)
    }
}

/// Batch-means estimate of `Sigma_eps`; `n_batches` defaults to
/// `ceil(sqrt(T))`.
pub fn batch_means_sigma(samples: &NoiseSample, n_batches: Option<usize>) -> Result<DMatrix<f64>> {
    let t = samples.len();
    let mut bm = BatchMeans::new(samples.dim(), t, n_batches.unwrap_or_else(|| default_batch_count(t)))?;
    for v in samples.iter() {
        bm.push(v);
    }
    bm.finish()
}

struct Transition<'a> {
    psi: &'a [f64],
    psi_next: &'a [f64],
    continues: bool,
    /// `psi(X_n) d_{n+1}(theta)`
    noise: &'a [f64],
}

/// Visits `psi(X_n) d_{n+1}(theta)` along a fresh trajectory on the noise
/// stream of `seed`.
fn for_each_noise<P, F>(
    problem: &P,
    features: &F,
    theta: &DVector<f64>,
    t: usize,
    seed: u64,
    mut visit: impl FnMut(&Transition<'_>),
) -> Result<()>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let d = features.dim();
    check_dim(d, theta.len())?;
    let beta = problem.beta();
    let theta = theta.as_slice();
    let mut rng = stream_rng(seed, NOISE_STREAM);
    let mut x = problem.initial_state(&mut rng);
    let mut psi = vec![0.0; d];
    let mut psi_next = vec![0.0; d];
    let mut eps = vec![0.0; d];
    features.eval_into(&x, &mut psi);
    let mut cost = problem.cost(&x);
    for _ in 0..t {
        problem.advance(&mut x, &mut rng);
        features.eval_into(&x, &mut psi_next);
        let q_next = dot(theta, &psi_next);
        let stop_cost = problem.stop_cost(&x);
        let td = temporal_difference(cost, dot(theta, &psi), q_next, stop_cost, beta);
        for (e, p) in eps.iter_mut().zip(&psi) {
            *e = p * td;
        }
        visit(&Transition {
            psi: &psi,
            psi_next: &psi_next,
            continues: !stops(q_next, stop_cost),
            noise: &eps,
        });
        std::mem::swap(&mut psi, &mut psi_next);
        cost = problem.cost(&x);
    }
    Ok(())
}

/// The noise sequence at `theta*`:
///
/// ```text
/// eps_n = (A_{n+1} - A(theta*)) theta* + (b_{n+1} - E b_{n+1})
///       = psi(X_n) d_{n+1}(theta*) - center
/// ```
///
/// with `b_{n+1} = psi(X_n) [c(X_n) + beta I{stop at X_{n+1}} c_s(X_{n+1})]`
/// and `center = A(theta*) theta* + E b_{n+1}`, the mean of
/// `psi(X_n) d_{n+1}(theta*)`. When `center` is `None` it is replaced by the
/// sample mean of the trajectory.
pub fn noise_trajectory<P, F>(
    problem: &P,
    features: &F,
    theta_star: &DVector<f64>,
    center: Option<&DVector<f64>>,
    t: usize,
    seed: u64,
) -> Result<NoiseSample>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let d = features.dim();
    let mut out = NoiseSample {
        dim: d,
        data: Vec::with_capacity(d * t),
    };
    for_each_noise(problem, features, theta_star, t, seed, |tr| {
        out.data.extend_from_slice(tr.noise)
    })?;
    if !out.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("noise sample".into()));
    }
    let center = match center {
        Some(c) => {
            check_dim(d, c.len())?;
            c.clone()
        }
        None => out.mean(),
    };
    for chunk in out.data.chunks_exact_mut(d.max(1)) {
        for (e, c) in chunk.iter_mut().zip(center.iter()) {
            *e -= c;
        }
    }
    Ok(out)
}

/// Batch-means `Sigma_eps` from a trajectory of length `t`, without storing
/// it. Centering is irrelevant because batch sums are re-centered.
pub fn noise_covariance<P, F>(
    problem: &P,
    features: &F,
    theta_star: &DVector<f64>,
    t: usize,
    n_batches: Option<usize>,
    seed: u64,
) -> Result<DMatrix<f64>>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let mut bm = BatchMeans::new(features.dim(), t, n_batches.unwrap_or_else(|| default_batch_count(t)))?;
    for_each_noise(problem, features, theta_star, t, seed, |tr| bm.push(tr.noise))?;
    let sigma = bm.finish()?;
    if !sigma.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("noise covariance".into()));
    }
    Ok(sigma)
}

/// Long-run averages along one trajectory at a fixed parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledMeanField {
    pub samples: usize,
    /// Average of `A_{n+1}`, row-major.
    pub a: Vec<Vec<f64>>,
    /// Average of `psi psi^T`, row-major.
    pub sigma_psi: Vec<Vec<f64>>,
    /// Batch-means `Sigma_eps`, row-major.
    pub sigma_eps: Vec<Vec<f64>>,
    /// Average of `psi(X_n) d_{n+1}(theta)`.
    pub mean_noise: Vec<f64>,
}

impl SampledMeanField {
    pub fn a_matrix(&self) -> DMatrix<f64> {
        crate::matrix_from_rows(&self.a)
    }
    pub fn sigma_psi_matrix(&self) -> DMatrix<f64> {
        crate::matrix_from_rows(&self.sigma_psi)
    }
    pub fn sigma_eps_matrix(&self) -> DMatrix<f64> {
        crate::matrix_from_rows(&self.sigma_eps)
    }
}

/// Monte-Carlo estimates of `A(theta)`, `Sigma_psi` and `Sigma_eps` for
/// chains without an exact oracle.
pub fn sample_mean_field<P, F>(
    problem: &P,
    features: &F,
    theta: &DVector<f64>,
    t: usize,
    n_batches: Option<usize>,
    seed: u64,
) -> Result<SampledMeanField>
where
    P: StoppingProblem,
    F: FeatureMap<P::State> + ?Sized,
{
    let d = features.dim();
    let beta = problem.beta();
    let mut bm = BatchMeans::new(d, t, n_batches.unwrap_or_else(|| default_batch_count(t)))?;
    // Column-major accumulators.
    let mut a = vec![0.0; d * d];
    let mut sp = vec![0.0; d * d];
    let mut mean = vec![0.0; d];
    for_each_noise(problem, features, theta, t, seed, |tr| {
        let cont = if tr.continues { beta } else { 0.0 };
        for j in 0..d {
            let w = cont * tr.psi_next[j] - tr.psi[j];
            let pj = tr.psi[j];
            for i in 0..d {
                a[j * d + i] += tr.psi[i] * w;
                sp[j * d + i] += tr.psi[i] * pj;
            }
        }
        for (m, e) in mean.iter_mut().zip(tr.noise) {
            *m += e;
        }
        bm.push(tr.noise);
    })?;
    let n = t as f64;
    let a = DMatrix::from_column_slice(d, d, &a) / n;
    let sp = DMatrix::from_column_slice(d, d, &sp) / n;
    let sigma_eps = bm.finish()?;
    if !(a.iter().chain(sigma_eps.iter()).all(|v| v.is_finite())) {
        return Err(Error::NonFinite("sampled mean field".into()));
    }
    Ok(SampledMeanField {
        samples: t,
        a: matrix_rows(&a),
        sigma_psi: matrix_rows(&((&sp + sp.transpose()) * 0.5)),
        sigma_eps: matrix_rows(&sigma_eps),
        mean_noise: mean.iter().map(|m| m / n).collect(),
    })
}

/// Exact stationary mean of `psi(X_n) d_{n+1}(theta)`: `b* - b(theta)`, zero
/// at the Galerkin fixed point.
pub fn finite_noise_mean(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(exact_b_star(model, basis)? - b_of_theta(model, basis, theta)?)
}

/// `(1/M) sum_m N (theta_m - theta*)(theta_m - theta*)^T`.
pub fn empirical_scaled_covariance(finals: &[DVector<f64>], theta_star: &DVector<f64>, n: u64) -> Result<DMatrix<f64>> {
    let m = finals.len();
    if m < 2 {
        return Err(Error::InsufficientSamples(format!("need at least 2 replicas, got {m}")));
    }
    let d = theta_star.len();
    let mut cov = DMatrix::zeros(d, d);
    for th in finals {
        check_dim(d, th.len())?;
        let e = th - theta_star;
        cov.ger(n as f64, &e, &e, 1.0);
    }
    Ok(cov / m as f64)
}

/// `sqrt(N) (theta_m(i) - theta*(i))` for every replica.
pub fn scaled_errors(finals: &[DVector<f64>], theta_star: &DVector<f64>, n: u64, coord: usize) -> Vec<f64> {
    let s = (n as f64).sqrt();
    finals.iter().map(|th| s * (th[coord] - theta_star[coord])).collect()
}

/// Theory against experiment for one gain configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub dim: usize,
    pub replicas: usize,
    pub n_iterations: u64,
    /// Lyapunov solution for the effective gain, when finite.
    pub sigma_theory: Option<Vec<Vec<f64>>>,
    /// `A^-1 Sigma_eps A^-T`.
    pub sigma_optimal: Option<Vec<Vec<f64>>>,
    pub sigma_empirical: Vec<Vec<f64>>,
    /// Diagonal of empirical over theory.
    pub ratios: Option<Vec<f64>>,
    pub trace_empirical: f64,
    pub trace_theory: Option<f64>,
    pub trace_optimal: Option<f64>,
    /// Empirical trace over theory trace.
    pub trace_ratio: Option<f64>,
    /// Empirical trace over optimal trace.
    pub trace_ratio_optimal: Option<f64>,
    /// Largest real part of the spectrum of `G A + I/2`.
    pub max_real_eigenvalue: Option<f64>,
    /// Whether every eigenvalue of `G A` has real part below `-1/2`.
    pub eigen_condition_holds: Option<bool>,
    pub infinite_covariance: bool,
    pub cond_a: f64,
    pub cond_flag: bool,
    pub notes: Vec<String>,
}

impl CovarianceReport {
    /// Builds the report. Numerical failures are recorded as notes; this
    /// never returns an error.
    pub fn build(
        gain: Option<&DMatrix<f64>>,
        a: &DMatrix<f64>,
        sigma_eps: &DMatrix<f64>,
        empirical: &DMatrix<f64>,
        replicas: usize,
        n_iterations: u64,
    ) -> Self {
        let d = a.nrows();
        let mut notes = Vec::new();
        let mut theory = None;
        let mut top = None;
        let mut infinite = false;
        match gain {
            Some(g) => {
                let m = g * a + DMatrix::identity(d, d) * 0.5;
                top = Some(max_real_eigenvalue(&m));
                match lyapunov_covariance(g, a, sigma_eps) {
                    Ok(s) => theory = Some(s),
                    Err(Error::InfiniteCovariance(v)) => {
                        infinite = true;
                        notes.push(format!(
                            "infinite asymptotic covariance: max Re eigenvalue of GA + I/2 is {v:.4}"
                        ));
                    }
                    Err(e) => notes.push(format!("Lyapunov solve failed: {e}")),
                }
            }
            None => notes.push("step size has no finite limit of n alpha_n; no 1/n covariance theory".into()),
        }
        let optimal = match optimal_covariance(a, sigma_eps) {
            Ok(s) => Some(s),
            Err(e) => {
                notes.push(format!("optimal covariance unavailable: {e}"));
                None
            }
        };
        let cond_a = condition_number(a);
        let cond_flag = !(cond_a <= COND_FLAG);
        if cond_flag {
            notes.push(format!("cond(A) = {cond_a:.3e} exceeds {COND_FLAG:e}"));
        }
        let trace_empirical = empirical.trace();
        let trace_theory = theory.as_ref().map(|s| s.trace());
        let trace_optimal = optimal.as_ref().map(|s| s.trace());
        Self {
            dim: d,
            replicas,
            n_iterations,
            ratios: theory
                .as_ref()
                .map(|s| (0..d).map(|i| empirical[(i, i)] / s[(i, i)]).collect()),
            sigma_theory: theory.as_ref().map(matrix_rows),
            sigma_optimal: optimal.as_ref().map(matrix_rows),
            sigma_empirical: matrix_rows(empirical),
            trace_empirical,
            trace_theory,
            trace_optimal,
            trace_ratio: trace_theory.map(|t| trace_empirical / t),
            trace_ratio_optimal: trace_optimal.map(|t| trace_empirical / t),
            max_real_eigenvalue: top,
            eigen_condition_holds: top.map(|v| v < 0.0),
            infinite_covariance: infinite,
            cond_a,
            cond_flag,
            notes,
        }
    }
}

/// The mean-field maps driving the Zap ODE.
pub trait MeanField: Sync {
    fn dim(&self) -> usize;
    fn a_matrix(&self, w: &DVector<f64>) -> Result<DMatrix<f64>>;
    fn b_value(&self, w: &DVector<f64>) -> Result<DVector<f64>>;
    fn b_star(&self) -> &DVector<f64>;
    /// Policy indicators; the maps are smooth while this is unchanged.
    fn regime(&self, w: &DVector<f64>) -> Vec<bool>;
}

/// Exact mean field of a finite chain and basis.
#[derive(Debug, Clone)]
pub struct FiniteMeanField<'a> {
    model: &'a FiniteChainModel,
    basis: &'a MatrixBasis,
    b_star: DVector<f64>,
}

impl<'a> FiniteMeanField<'a> {
    pub fn new(model: &'a FiniteChainModel, basis: &'a MatrixBasis) -> Result<Self> {
        Ok(Self {
            model,
            basis,
            b_star: exact_b_star(model, basis)?,
        })
    }
}

impl MeanField for FiniteMeanField<'_> {
    fn dim(&self) -> usize {
        self.basis.dim()
    }
    fn a_matrix(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        exact_a(self.model, self.basis, w)
    }
    fn b_value(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        b_of_theta(self.model, self.basis, w)
    }
    fn b_star(&self) -> &DVector<f64> {
        &self.b_star
    }
    fn regime(&self, w: &DVector<f64>) -> Vec<bool> {
        (0..self.basis.n_states())
            .map(|x| stops(dot(self.basis.row(x), w.as_slice()), self.model.stop_costs()[x]))
            .collect()
    }
}

/// `-A(w)^-1 (b* - b(w))`.
pub fn zap_vector_field<M: MeanField + ?Sized>(field: &M, w: &DVector<f64>) -> Result<DVector<f64>> {
    let a = field.a_matrix(w)?;
    let r = field.b_star() - field.b_value(w)?;
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Singular("A(w) along the ODE".into()))?;
    Ok(-v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeSettings {
    pub dt: f64,
    /// Smallest step when halving near a policy change.
    pub dt_min: f64,
    /// Cap on step attempts.
    pub max_steps: usize,
}

impl Default for OdeSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            dt_min: 1e-6,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeTrajectory {
    pub t: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub b_star: Vec<f64>,
    /// Steps halved because a policy indicator changed inside them.
    pub rejected_steps: usize,
}

impl OdeTrajectory {
    /// Linear interpolation of `w` at `t`, clamped to the time range.
    pub fn at(&self, t: f64) -> DVector<f64> {
        DVector::from_vec(interpolate(&self.t, &self.w, t))
    }

    /// `||b(w(t)) - b*||` at every stored time.
    pub fn b_residuals(&self) -> Vec<f64> {
        self.b
            .iter()
            .map(|b| {
                b.iter()
                    .zip(&self.b_star)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

fn interpolate(ts: &[f64], ws: &[Vec<f64>], t: f64) -> Vec<f64> {
    let k = ts.partition_point(|&s| s <= t);
    if k == 0 {
        return ws[0].clone();
    }
    if k == ts.len() {
        return ws[k - 1].clone();
    }
    let (t0, t1) = (ts[k - 1], ts[k]);
    let lam = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    ws[k - 1].iter().zip(&ws[k]).map(|(a, b)| a + lam * (b - a)).collect()
}

fn rk4_step<M: MeanField + ?Sized>(
    field: &M,
    w: &DVector<f64>,
    h: f64,
    regime: &[bool],
) -> Result<(DVector<f64>, bool)> {
    let mut crossed = false;
    let k1 = zap_vector_field(field, w)?;
    let w2 = w + &k1 * (h / 2.0);
    crossed |= field.regime(&w2) != regime;
    let k2 = zap_vector_field(field, &w2)?;
    let w3 = w + &k2 * (h / 2.0);
    crossed |= field.regime(&w3) != regime;
    let k3 = zap_vector_field(field, &w3)?;
    let w4 = w + &k3 * h;
    crossed |= field.regime(&w4) != regime;
    let k4 = zap_vector_field(field, &w4)?;
    let next = w + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    crossed |= field.regime(&next) != regime;
    Ok((next, crossed))
}

/// Integrates the Zap ODE from `w0` over `[0, horizon]` with RK4. A step in
/// which the policy changes is halved until it is clean or reaches
/// `dt_min`.
pub fn ode_integrate<M: MeanField + ?Sized>(
    field: &M,
    w0: &DVector<f64>,
    horizon: f64,
    settings: &OdeSettings,
) -> Result<OdeTrajectory> {
    check_dim(field.dim(), w0.len())?;
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Integration(format!("invalid horizon {horizon}")));
    }
    if !(settings.dt > 0.0 && settings.dt_min > 0.0 && settings.dt_min <= settings.dt) {
        return Err(Error::Integration("need 0 < dt_min <= dt".into()));
    }
    let mut out = OdeTrajectory {
        t: vec![0.0],
        w: vec![w0.iter().copied().collect()],
        b: vec![field.b_value(w0)?.iter().copied().collect()],
        b_star: field.b_star().iter().copied().collect(),
        rejected_steps: 0,
    };
    let mut w = w0.clone();
    let mut t = 0.0;
    let mut attempts = 0;
    let end = horizon * (1.0 - 1e-12);
    while t < end {
        let regime = field.regime(&w);
        let mut h = settings.dt.min(horizon - t);
        loop {
            attempts += 1;
            if attempts > settings.max_steps {
                return Err(Error::Integration(format!("step limit reached at t = {t}")));
            }
            let (next, crossed) = rk4_step(field, &w, h, &regime)?;
            if crossed && h > settings.dt_min {
                h = (h / 2.0).max(settings.dt_min);
                out.rejected_steps += 1;
                continue;
            }
            w = next;
            t += h;
            break;
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("ODE state at t = {t}")));
        }
        out.t.push(t);
        out.w.push(w.iter().copied().collect());
        out.b.push(field.b_value(&w)?.iter().copied().collect());
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `t` over points with `y > 0`.
pub fn fit_log_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&s, &v)| (s, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `sup_{t in [s, s+T]} ||w_bar(t) - w^s(t)||` for each start time `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationProfile {
    pub horizon: f64,
    pub starts: Vec<f64>,
    pub deviations: Vec<f64>,
}

/// Snapshot iterates placed on the clock `t_n = sum_{i <= n} alpha_i`.
pub fn interpolation_nodes(record: &RunRecord, alpha: &StepSizeSchedule) -> (Vec<f64>, Vec<Vec<f64>>) {
    let ns: Vec<u64> = record.snapshots.iter().map(|s| s.n).collect();
    let ts = alpha.clock(&ns);
    (ts, record.snapshots.iter().map(|s| s.theta.clone()).collect())
}

/// `k` evenly spaced start times from the first nonzero snapshot time to
/// the last time that leaves room for a window of length `horizon`.
pub fn start_grid(record: &RunRecord, alpha: &StepSizeSchedule, horizon: f64, k: usize) -> Result<Vec<f64>> {
    let (ts, _) = interpolation_nodes(record, alpha);
    let first = ts.iter().copied().find(|&t| t > 0.0);
    let last = ts.last().copied().unwrap_or(0.0) - horizon;
    match first {
        Some(f) if last > f && k >= 2 => Ok((0..k).map(|i| f + (last - f) * i as f64 / (k - 1) as f64).collect()),
        _ => Err(Error::InsufficientSamples(format!(
            "snapshots do not cover {k} windows of length {horizon}"
        ))),
    }
}

/// Compares the interpolated iterates of a Zap run with ODE solutions
/// restarted from them at each of `starts`.
pub fn sa_vs_ode_deviation<M: MeanField + ?Sized>(
    record: &RunRecord,
    alpha: &StepSizeSchedule,
    field: &M,
    horizon: f64,
    starts: &[f64],
    settings: &OdeSettings,
) -> Result<DeviationProfile> {
    let (ts, ws) = interpolation_nodes(record, alpha);
    if ts.len() < 2 {
        return Err(Error::InsufficientSamples("need at least two snapshots".into()));
    }
    let t_end = *ts.last().unwrap();
    if let Some(&s) = starts.iter().find(|&&s| s < 0.0 || s + horizon > t_end * (1.0 + 1e-12)) {
        return Err(Error::InsufficientSamples(format!(
            "window [{s}, {}] is outside the snapshot range [0, {t_end}]",
            s + horizon
        )));
    }
    let deviations = starts
        .par_iter()
        .map(|&s| {
            let w0 = DVector::from_vec(interpolate(&ts, &ws, s));
            let ode = ode_integrate(field, &w0, horizon, settings)?;
            let gap = |t: f64| {
                let a = interpolate(&ts, &ws, t);
                let b = ode.at(t - s);
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            let on_ode = ode.t.iter().map(|&u| gap(s + u));
            let on_snapshots = ts.iter().filter(|&&t| t >= s && t <= s + horizon).map(|&t| gap(t));
            Ok(on_ode.chain(on_snapshots).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DeviationProfile {
        horizon,
        starts: starts.to_vec(),
        deviations,
    })
}
