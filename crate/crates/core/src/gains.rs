//! Step sizes, matrix-gain strategies and the guarded pseudo-inverse.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Default relative singular-value cutoff of [`guarded_pinv`].
pub const DEFAULT_REL_THRESHOLD: f64 = 1e-8;

/// Scalar step-size sequence indexed from `n = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSizeSchedule {
    /// `1 / n`
    Harmonic,
    /// `g / (b + n)`
    Scaled { g: f64, b: f64 },
    /// `1 / n^rho` with `rho` in `(0.5, 1)`
    Polynomial { rho: f64 },
    /// `g / n`
    ScaledHarmonic { g: f64 },
}

impl StepSizeSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Harmonic => Ok(()),
            Self::Scaled { g, b } if g > 0.0 && g.is_finite() && b >= 0.0 && b.is_finite() => Ok(()),
            Self::Polynomial { rho } if rho > 0.5 && rho < 1.0 => Ok(()),
            Self::ScaledHarmonic { g } if g > 0.0 && g.is_finite() => Ok(()),
            other => Err(Error::InvalidSchedule(format!("{other:?}"))),
        }
    }

    /// `alpha_n`; rejects `n = 0`.
    pub fn step_size(&self, n: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::ZeroStepIndex);
        }
        self.validate()?;
        Ok(self.at(n))
    }

    /// Unchecked evaluation for validated schedules and `n >= 1`.
    #[inline]
    pub fn at(&self, n: u64) -> f64 {
        let n = n as f64;
        match *self {
            Self::Harmonic => 1.0 / n,
            Self::Scaled { g, b } => g / (b + n),
            Self::Polynomial { rho } => n.powf(-rho),
            Self::ScaledHarmonic { g } => g / n,
        }
    }

    /// `lim n * alpha_n`, the scalar that multiplies the matrix gain in the
    /// linearized `1/n` recursion. `None` for polynomial schedules.
    pub fn asymptotic_gain(&self) -> Option<f64> {
        match *self {
            Self::Harmonic => Some(1.0),
            Self::Scaled { g, .. } | Self::ScaledHarmonic { g } => Some(g),
            Self::Polynomial { .. } => None,
        }
    }

    /// `t_n = sum_{i <= n} alpha_i` for every `n` in `ns` (sorted ascending).
    pub fn clock(&self, ns: &[u64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ns.len());
        let mut t = 0.0;
        let mut k = 0u64;
        for &n in ns {
            while k < n {
                k += 1;
                t += self.at(k);
            }
            out.push(t);
        }
        out
    }
}

/// Which matrix gain the parameter recursion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainStrategy {
    /// `G_n = I`
    Identity,
    /// `G_n = pinv(Sigma_hat_n)`, the fixed-point Kalman filter gain.
    Kalman,
    /// `G_n = -pinv(A_hat_n)`
    Zap,
}

/// `A_{n+1} = psi_n [beta * cont * psi_next - psi_n]^T`.
pub fn a_sample(psi_n: &[f64], psi_next: &[f64], continue_indicator: f64, beta: f64) -> Result<DMatrix<f64>> {
    check_dim(psi_n.len(), psi_next.len())?;
    let d = psi_n.len();
    let k = beta * continue_indicator;
    Ok(DMatrix::from_fn(d, d, |i, j| psi_n[i] * (k * psi_next[j] - psi_n[j])))
}

/// SVD pseudo-inverse that zeroes singular values below
/// `rel_threshold * sigma_max`. Returns the zero matrix for `M = 0`.
pub fn guarded_pinv(m: &DMatrix<f64>, rel_threshold: f64) -> DMatrix<f64> {
    guarded_pinv_counted(m, rel_threshold).0
}

/// [`guarded_pinv`] plus the number of truncated singular values.
pub fn guarded_pinv_counted(m: &DMatrix<f64>, rel_threshold: f64) -> (DMatrix<f64>, usize) {
    let (r, c) = m.shape();
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax <= 0.0 || !smax.is_finite() {
        return (DMatrix::zeros(c, r), svd.singular_values.len());
    }
    let cutoff = rel_threshold * smax;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut out = DMatrix::zeros(c, r);
    let mut truncated = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s < cutoff {
            truncated += 1;
            continue;
        }
        // out += v_k u_k^T / s
        out.ger(1.0 / s, &vt.row(k).transpose(), &u.column(k), 1.0);
    }
    (out, truncated)
}

/// Running matrix-gain estimate and its cached guarded inverse.
#[derive(Debug, Clone)]
pub struct GainState {
    strategy: GainStrategy,
    /// `A_hat` (Zap) or `Sigma_hat` (Kalman); unused for Identity.
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    /// `matrix`, after the optional eigenvalue clamp.
    target: DMatrix<f64>,
    scratch: DMatrix<f64>,
    n: u64,
    rel_threshold: f64,
    eigen_clamp: Option<f64>,
    truncations: u64,
}

impl GainState {
    pub fn identity(d: usize) -> Self {
        Self::build(
            GainStrategy::Identity,
            DMatrix::identity(d, d),
            DEFAULT_REL_THRESHOLD,
            None,
        )
    }

    /// Zap gain starting from `a0`, which must be negative definite.
    pub fn zap(a0: DMatrix<f64>, rel_threshold: f64, eigen_clamp: Option<f64>) -> Result<Self> {
        if !a0.is_square() {
            return Err(Error::InvalidModel("A_hat_0 must be square".into()));
        }
        let sym = (&a0 + a0.transpose()) * 0.5;
        let top = SymmetricEigen::new(sym).eigenvalues.max();
        if top >= 0.0 {
            return Err(Error::InvalidModel(format!(
                "A_hat_0 must be negative definite (largest symmetric eigenvalue {top})"
            )));
        }
        Ok(Self::build(GainStrategy::Zap, a0, rel_threshold, eigen_clamp))
    }

    /// Kalman gain starting from the covariance estimate `sigma0`.
    pub fn kalman(sigma0: DMatrix<f64>, rel_threshold: f64) -> Result<Self> {
        if !sigma0.is_square() {
            return Err(Error::InvalidModel("Sigma_hat_0 must be square".into()));
        }
        Ok(Self::build(GainStrategy::Kalman, sigma0, rel_threshold, None))
    }

    fn build(strategy: GainStrategy, matrix: DMatrix<f64>, rel_threshold: f64, eigen_clamp: Option<f64>) -> Self {
        let d = matrix.nrows();
        let mut s = Self {
            strategy,
            inverse: DMatrix::identity(d, d),
            target: DMatrix::zeros(d, d),
            scratch: DMatrix::zeros(d, d),
            matrix,
            n: 0,
            rel_threshold,
            eigen_clamp,
            truncations: 0,
        };
        s.refresh();
        s
    }

    pub fn strategy(&self) -> GainStrategy {
        self.strategy
    }
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    /// Current `A_hat` or `Sigma_hat`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    /// Cached guarded inverse of [`Self::matrix`].
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }
    pub fn updates(&self) -> u64 {
        self.n
    }
    /// Number of updates whose guarded inverse dropped a singular value.
    pub fn truncations(&self) -> u64 {
        self.truncations
    }

    /// The matrix gain `G`.
    pub fn gain(&self) -> DMatrix<f64> {
        match self.strategy {
            GainStrategy::Identity => DMatrix::identity(self.dim(), self.dim()),
            GainStrategy::Kalman => self.inverse.clone(),
            GainStrategy::Zap => -&self.inverse,
        }
    }

    /// `out = G v`.
    #[inline]
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        match self.strategy {
            GainStrategy::Identity => out.copy_from_slice(v),
            GainStrategy::Kalman | GainStrategy::Zap => {
                let sign = if self.strategy == GainStrategy::Zap { -1.0 } else { 1.0 };
                let inv = self.inverse.as_slice();
                out.iter_mut().for_each(|o| *o = 0.0);
                // Column-major: column j of the inverse is contiguous.
                for (j, &vj) in v.iter().enumerate() {
                    let col = &inv[j * d..(j + 1) * d];
                    let w = sign * vj;
                    for (o, c) in out.iter_mut().zip(col) {
                        *o += w * c;
                    }
                }
            }
        }
    }

    /// `A_hat <- A_hat + gamma (A_sample - A_hat)`.
    pub fn update_zap(&mut self, a_sample: &DMatrix<f64>, gamma: f64) -> Result<()> {
        self.expect(GainStrategy::Zap)?;
        check_dim(self.dim(), a_sample.nrows())?;
        check_dim(self.dim(), a_sample.ncols())?;
        self.matrix.zip_apply(a_sample, |m, a| *m += gamma * (a - *m));
        self.n += 1;
        self.refresh();
        Ok(())
    }

    /// Zap update with the rank-one sample `u w^T`, without forming it.
    #[inline]
    pub fn update_zap_rank_one(&mut self, u: &[f64], w: &[f64], gamma: f64) {
        let d = self.dim();
        let keep = 1.0 - gamma;
        let m = self.matrix.as_mut_slice();
        for j in 0..d {
            let gw = gamma * w[j];
            let col = &mut m[j * d..(j + 1) * d];
            for (mij, ui) in col.iter_mut().zip(u) {
                *mij = keep * *mij + gw * ui;
            }
        }
        self.n += 1;
        self.refresh();
    }

    /// `Sigma_hat <- Sigma_hat + alpha (psi psi^T - Sigma_hat)`.
    pub fn update_kalman(&mut self, psi: &[f64], alpha: f64) -> Result<()> {
        self.expect(GainStrategy::Kalman)?;
        check_dim(self.dim(), psi.len())?;
        self.update_kalman_unchecked(psi, alpha);
        Ok(())
    }

    #[inline]
    pub(crate) fn update_kalman_unchecked(&mut self, psi: &[f64], alpha: f64) {
        let d = self.dim();
        let keep = 1.0 - alpha;
        let m = self.matrix.as_mut_slice();
        for j in 0..d {
            let aw = alpha * psi[j];
            for i in 0..d {
                m[j * d + i] = keep * m[j * d + i] + aw * psi[i];
            }
        }
        self.n += 1;
        self.refresh();
    }

    fn expect(&self, s: GainStrategy) -> Result<()> {
        if self.strategy == s {
            Ok(())
        } else {
            Err(Error::Config(format!("gain state is {:?}, not {s:?}", self.strategy)))
        }
    }

    fn refresh(&mut self) {
        if self.strategy == GainStrategy::Identity {
            return;
        }
        self.target.copy_from(&self.matrix);
        if let (GainStrategy::Zap, Some(delta)) = (self.strategy, self.eigen_clamp) {
            clamp_negative(&mut self.target, delta);
        }
        // Fast path: when ||M||_F ||M^-1||_F <= 1 / rel_threshold the 2-norm
        // condition number is below the cutoff, so no singular value would be
        // truncated and the pseudo-inverse is the inverse. The residual check
        // catches cofactor inverses of numerically singular matrices, which
        // can come out finite and small.
        self.scratch.copy_from(&self.target);
        let norm = self.target.norm();
        if norm > 0.0 && self.scratch.try_inverse_mut() {
            let inv_norm = self.scratch.norm();
            if inv_norm.is_finite()
                && norm * inv_norm * self.rel_threshold <= 1.0
                && inverse_residual(&self.target, &self.scratch) <= 1e-9
            {
                std::mem::swap(&mut self.inverse, &mut self.scratch);
                return;
            }
        }
        let (pinv, truncated) = guarded_pinv_counted(&self.target, self.rel_threshold);
        if truncated > 0 {
            self.truncations += 1;
        }
        self.inverse = pinv;
    }
}

/// `max |M X - I|`.
fn inverse_residual(m: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    let (ms, xs) = (m.as_slice(), x.as_slice());
    let mut worst = 0.0f64;
    for j in 0..d {
        for i in 0..d {
            let mut acc = if i == j { -1.0 } else { 0.0 };
            for k in 0..d {
                acc += ms[k * d + i] * xs[j * d + k];
            }
            worst = worst.max(acc.abs());
        }
    }
    worst
}

/// Shifts `m` by a multiple of the identity so its symmetric part has every
/// eigenvalue at most `-delta`; then every eigenvalue of `m` has real part at
/// most `-delta`.
fn clamp_negative(m: &mut DMatrix<f64>, delta: f64) {
    let sym = (&*m + m.transpose()) * 0.5;
    let top = SymmetricEigen::new(sym).eigenvalues.max();
    if top > -delta {
        let shift = top + delta;
        for i in 0..m.nrows() {
            m[(i, i)] -= shift;
        }
    }
}
