//! Exact ground truth on finite chains.
//!
//! With `Phi` the `n x d` basis matrix, `D = diag(pi)` and `s(theta)` the
//! continuation indicator `I{Q^theta(y) < c_s(y)}`:
//!
//! ```text
//! A(theta)     = Phi^T D (beta P diag(s) Phi - Phi)
//! b*           = Phi^T D c
//! cbar(theta)  = Phi^T D P ((1 - s) * c_s)
//! b(theta)     = -A(theta) theta - beta cbar(theta)
//! Sigma_psi    = Phi^T D Phi
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{FiniteChainModel, StoppingProblem};
use crate::error::{check_dim, Error, Result};
use crate::features::{stops, MatrixBasis};
use crate::matrix_rows;

/// Default sup-norm tolerance of value iteration.
pub const DEFAULT_VI_TOL: f64 = 1e-12;
/// Default step tolerance of projected value iteration.
pub const DEFAULT_PVI_TOL: f64 = 1e-10;

const MAX_ITERATIONS: usize = 50_000_000;
const RANK_TOL: f64 = 1e-10;

/// `<f, g>_pi`
pub fn pi_inner(model: &FiniteChainModel, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
    f.iter()
        .zip(g.iter())
        .zip(model.stationary().iter())
        .map(|((a, b), p)| a * b * p)
        .sum()
}

/// `||f||_pi`
pub fn pi_norm(model: &FiniteChainModel, f: &DVector<f64>) -> f64 {
    pi_inner(model, f, f).sqrt()
}

/// `(FQ)(x) = c(x) + beta sum_y P(x, y) min(c_s(y), Q(y))`.
pub fn bellman_f(model: &FiniteChainModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(model.n_states(), q.len())?;
    let m = q.zip_map(model.stop_costs(), |qv, cs| cs.min(qv));
    Ok(model.costs() + model.transition() * m * model.beta())
}

/// `F^theta Q = c + beta P H^theta Q`, where `H^theta Q` keeps `Q` on the
/// continuation set of `theta` and uses `c_s` elsewhere.
#[cfg(test)]
fn bellman_f_theta(
    model: &FiniteChainModel,
    basis: &MatrixBasis,
    theta: &DVector<f64>,
    q: &DVector<f64>,
) -> DVector<f64> {
    let s = continuation(model, basis, theta);
    let h = DVector::from_fn(q.len(), |y, _| if s[y] == 1.0 { q[y] } else { model.stop_costs()[y] });
    model.costs() + model.transition() * h * model.beta()
}

/// Value iteration from `Q = 0`; returns `Q*` and the sup-norm residual of
/// every iteration.
pub fn solve_q_star_traced(model: &FiniteChainModel, tol: f64) -> Result<(DVector<f64>, Vec<f64>)> {
    if !(tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let mut q = DVector::zeros(model.n_states());
    let mut residuals = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let next = bellman_f(model, &q)?;
        let r = (&next - &q).amax();
        residuals.push(r);
        q = next;
        if r <= tol {
            return Ok((q, residuals));
        }
    }
    Err(Error::NonFinite("value iteration did not converge".into()))
}

/// `Q*`, the fixed point of [`bellman_f`].
pub fn solve_q_star(model: &FiniteChainModel, tol: f64) -> Result<DVector<f64>> {
    solve_q_star_traced(model, tol).map(|(q, _)| q)
}

/// `Q^theta = Phi theta` over all states.
pub fn q_theta(basis: &MatrixBasis, theta: &DVector<f64>) -> DVector<f64> {
    basis.matrix() * theta
}

/// `s(theta)_y = I{Q^theta(y) < c_s(y)}` as 0/1 floats.
pub fn continuation(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> DVector<f64> {
    q_theta(basis, theta).zip_map(model.stop_costs(), |q, cs| if stops(q, cs) { 0.0 } else { 1.0 })
}

/// `min_y |Q^theta(y) - c_s(y)|`: how far `theta` is from changing its
/// policy.
pub fn tie_margin(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> f64 {
    (q_theta(basis, theta) - model.stop_costs()).amin()
}

fn weighted_basis(model: &FiniteChainModel, basis: &MatrixBasis) -> DMatrix<f64> {
    // D Phi
    let mut dphi = basis.matrix().clone();
    for (mut row, &p) in dphi.row_iter_mut().zip(model.stationary().iter()) {
        row *= p;
    }
    dphi
}

fn check_basis(model: &FiniteChainModel, basis: &MatrixBasis) -> Result<()> {
    check_dim(model.n_states(), basis.n_states())
}

/// `Sigma_psi(i, j) = sum_x pi(x) psi_i(x) psi_j(x)`.
pub fn exact_sigma_psi(model: &FiniteChainModel, basis: &MatrixBasis) -> Result<DMatrix<f64>> {
    check_basis(model, basis)?;
    let s = basis.matrix().transpose() * weighted_basis(model, basis);
    // Exact symmetry.
    Ok((&s + s.transpose()) * 0.5)
}

/// `A(theta)`.
pub fn exact_a(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_basis(model, basis)?;
    check_dim(basis.matrix().ncols(), theta.len())?;
    let phi = basis.matrix();
    let s = continuation(model, basis, theta);
    let mut sphi = phi.clone();
    for (mut row, &sv) in sphi.row_iter_mut().zip(s.iter()) {
        row *= sv;
    }
    let inner = model.transition() * sphi * model.beta() - phi;
    Ok(weighted_basis(model, basis).transpose() * inner)
}

/// `b* = Phi^T D c`.
pub fn exact_b_star(model: &FiniteChainModel, basis: &MatrixBasis) -> Result<DVector<f64>> {
    check_basis(model, basis)?;
    Ok(weighted_basis(model, basis).transpose() * model.costs())
}

/// `cbar_s(theta) = E[psi(X_n) I{c_s(X_{n+1}) <= Q^theta(X_{n+1})} c_s(X_{n+1})]`.
pub fn exact_cbar(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_basis(model, basis)?;
    check_dim(basis.matrix().ncols(), theta.len())?;
    let s = continuation(model, basis, theta);
    let stopped = model.stop_costs().zip_map(&s, |cs, sv| (1.0 - sv) * cs);
    Ok(weighted_basis(model, basis).transpose() * (model.transition() * stopped))
}

/// `b(theta) = -A(theta) theta - beta cbar_s(theta)`.
pub fn b_of_theta(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let a = exact_a(model, basis, theta)?;
    let cbar = exact_cbar(model, basis, theta)?;
    Ok(-(a * theta) - cbar * model.beta())
}

/// `c^theta(x) = Q^theta(x) - beta E[min(c_s(X_1), Q^theta(X_1)) | X_0 = x]`.
pub fn c_theta(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_basis(model, basis)?;
    let q = q_theta(basis, theta);
    let m = q.zip_map(model.stop_costs(), |qv, cs| cs.min(qv));
    Ok(&q - model.transition() * m * model.beta())
}

/// `E_pi[psi(X) f(X)]`.
pub fn project(model: &FiniteChainModel, basis: &MatrixBasis, f: &DVector<f64>) -> DVector<f64> {
    weighted_basis(model, basis).transpose() * f
}

/// `<F Q^theta - Q^theta, psi_i>_pi` for every `i`.
pub fn galerkin_residual(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_basis(model, basis)?;
    let q = q_theta(basis, theta);
    let err = bellman_f(model, &q)? - q;
    Ok(project(model, basis, &err))
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.min()
}

/// Errors unless `Sigma_psi` has smallest singular value above `1e-10`.
pub fn check_full_rank(model: &FiniteChainModel, basis: &MatrixBasis) -> Result<DMatrix<f64>> {
    let sigma = exact_sigma_psi(model, basis)?;
    let smin = smallest_singular_value(&sigma);
    if smin <= RANK_TOL {
        return Err(Error::RankDeficientBasis(smin));
    }
    Ok(sigma)
}

/// Projected value iteration `theta <- Sigma_psi^-1 E_pi[psi F Q^theta]`
/// until successive iterates differ by at most `tol`.
///
/// The iteration is a `beta`-contraction in the `pi`-norm of `Q^theta`. Once
/// it has converged the continuation set is locally constant, so the limit
/// is polished with one exact solve of the (then linear) fixed-point
/// equation, kept only if the policy is unchanged and the residual shrinks.
pub fn solve_theta_star(model: &FiniteChainModel, basis: &MatrixBasis, tol: f64) -> Result<DVector<f64>> {
    if !(tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let sigma = check_full_rank(model, basis)?;
    let chol = sigma.cholesky().ok_or(Error::RankDeficientBasis(0.0))?;
    let d = basis.matrix().ncols();
    let mut theta = DVector::zeros(d);
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let fq = bellman_f(model, &q_theta(basis, &theta))?;
        let next = chol.solve(&project(model, basis, &fq));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projected value iteration".into()));
        }
        let step = (&next - &theta).norm();
        theta = next;
        if step <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonFinite("projected value iteration did not converge".into()));
    }
    Ok(newton_polish(model, basis, theta))
}

fn newton_polish(model: &FiniteChainModel, basis: &MatrixBasis, theta: DVector<f64>) -> DVector<f64> {
    let (Ok(a), Ok(cbar), Ok(bstar)) = (
        exact_a(model, basis, &theta),
        exact_cbar(model, basis, &theta),
        exact_b_star(model, basis),
    ) else {
        return theta;
    };
    let Some(candidate) = a.lu().solve(&(-(cbar * model.beta() + bstar))) else {
        return theta;
    };
    let same_policy = continuation(model, basis, &candidate) == continuation(model, basis, &theta);
    let before = galerkin_residual(model, basis, &theta).map(|r| r.amax());
    let after = galerkin_residual(model, basis, &candidate).map(|r| r.amax());
    match (same_policy, before, after) {
        (true, Ok(b), Ok(a)) if a <= b => candidate,
        _ => theta,
    }
}

/// `min_theta ||Q^theta - f||_pi`, the error of the weighted least-squares
/// projection of `f` onto the basis span.
pub fn projection_error(model: &FiniteChainModel, basis: &MatrixBasis, f: &DVector<f64>) -> Result<f64> {
    let sigma = check_full_rank(model, basis)?;
    let coef = sigma
        .cholesky()
        .ok_or(Error::RankDeficientBasis(0.0))?
        .solve(&project(model, basis, f));
    Ok(pi_norm(model, &(q_theta(basis, &coef) - f)))
}

/// Exact discounted cost of the stopping rule `phi^theta` from every state:
/// `h = c_s` where the rule stops, `h = c + beta P h` elsewhere.
pub fn policy_value(model: &FiniteChainModel, basis: &MatrixBasis, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_basis(model, basis)?;
    let n = model.n_states();
    let s = continuation(model, basis, theta);
    let mut lhs = DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for x in 0..n {
        if s[x] == 1.0 {
            for y in 0..n {
                lhs[(x, y)] -= model.beta() * model.transition()[(x, y)];
            }
            rhs[x] = model.costs()[x];
        } else {
            rhs[x] = model.stop_costs()[x];
        }
    }
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("policy evaluation system".into()))
}

/// Exact quantities at the Galerkin fixed point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactQuantities {
    pub beta: f64,
    pub theta_star: Vec<f64>,
    pub q_star: Vec<f64>,
    /// `A(theta*)`, row-major.
    pub a_star: Vec<Vec<f64>>,
    pub b_star: Vec<f64>,
    pub cbar_star: Vec<f64>,
    /// `Sigma_psi`, row-major.
    pub sigma_psi: Vec<Vec<f64>>,
    /// `max_i |<F Q^theta* - Q^theta*, psi_i>_pi|`
    pub galerkin_residual: f64,
    pub tie_margin: f64,
}

impl ExactQuantities {
    pub fn compute(model: &FiniteChainModel, basis: &MatrixBasis) -> Result<Self> {
        let theta = solve_theta_star(model, basis, DEFAULT_PVI_TOL)?;
        let q_star = solve_q_star(model, DEFAULT_VI_TOL)?;
        Ok(Self {
            beta: model.beta(),
            q_star: q_star.iter().copied().collect(),
            a_star: matrix_rows(&exact_a(model, basis, &theta)?),
            b_star: exact_b_star(model, basis)?.iter().copied().collect(),
            cbar_star: exact_cbar(model, basis, &theta)?.iter().copied().collect(),
            sigma_psi: matrix_rows(&exact_sigma_psi(model, basis)?),
            galerkin_residual: galerkin_residual(model, basis, &theta)?.amax(),
            tie_margin: tie_margin(model, basis, &theta),
            theta_star: theta.iter().copied().collect(),
        })
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }
}
