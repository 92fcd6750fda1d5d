//! Linear function approximation: basis maps, `Q^theta`, and the induced
//! stopping policy.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{FiniteChainModel, GbmState};
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream_rng, INSTANCE_STREAM};

/// A basis `psi: X -> R^d`.
pub trait FeatureMap<S: ?Sized>: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `psi(x)` into `out`, which has length `dim()`.
    fn eval_into(&self, x: &S, out: &mut [f64]);

    fn label(&self) -> String;

    fn eval(&self, x: &S) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_into(x, out.as_mut_slice());
        out
    }
}

/// Stop or continue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue = 0,
    Stop = 1,
}

impl Decision {
    pub fn indicator(self) -> u8 {
        self as u8
    }
}

/// The stopping rule `I{c_s(x) <= q}`. Ties stop.
#[inline]
pub fn stops(q: f64, stop_cost: f64) -> bool {
    stop_cost <= q
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Q^theta(x) = theta^T psi(x)`.
pub fn q_value<S: ?Sized, F: FeatureMap<S> + ?Sized>(theta: &DVector<f64>, features: &F, x: &S) -> Result<f64> {
    check_dim(features.dim(), theta.len())?;
    Ok(features.eval(x).dot(theta))
}

/// `phi^theta(x)`: stop iff `c_s(x) <= Q^theta(x)`.
pub fn policy<S: ?Sized, F: FeatureMap<S> + ?Sized>(
    theta: &DVector<f64>,
    features: &F,
    x: &S,
    stop_cost: f64,
) -> Result<Decision> {
    let q = q_value(theta, features, x)?;
    Ok(if stops(q, stop_cost) {
        Decision::Stop
    } else {
        Decision::Continue
    })
}

/// `I{Q^theta(x) < c_s(x)}`, the complement of [`policy`].
pub fn s_theta_indicator<S: ?Sized, F: FeatureMap<S> + ?Sized>(
    theta: &DVector<f64>,
    features: &F,
    x: &S,
    stop_cost: f64,
) -> Result<u8> {
    Ok(1 - policy(theta, features, x, stop_cost)?.indicator())
}

/// Basis on a finite state set, stored as an `n x d` matrix whose row `x`
/// is `psi(x)`.
#[derive(Debug, Clone)]
pub struct MatrixBasis {
    phi: DMatrix<f64>,
    rows: Vec<f64>,
    label: String,
}

impl MatrixBasis {
    pub fn new(phi: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(Error::InvalidModel("empty basis matrix".into()));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite basis entry".into()));
        }
        let rows = phi.transpose().as_slice().to_vec();
        Ok(Self {
            phi,
            rows,
            label: label.into(),
        })
    }

    /// One-hot features: `psi_i(x) = I{x = i}`.
    pub fn tabular(n_states: usize) -> Self {
        Self::new(DMatrix::identity(n_states, n_states), "tabular").expect("identity is a valid basis")
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidModel("ragged basis rows".into()));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]), label)
    }

    /// `[1, c_s, u_3, ..., u_d]` with `u_k` uniform on `[-1, 1]`. Contains the
    /// constant and the stopping cost, so `c_s - 1` lies in the span.
    pub fn random_with_stop_cost(model: &FiniteChainModel, d: usize, seed: u64) -> Result<Self> {
        if d < 2 || d > model.n_states() {
            return Err(Error::InvalidModel(format!(
                "random basis needs 2 <= d <= n_states, got d = {d}"
            )));
        }
        let n = model.n_states();
        let mut rng = stream_rng(seed, INSTANCE_STREAM);
        let mut phi = DMatrix::zeros(n, d);
        for x in 0..n {
            phi[(x, 0)] = 1.0;
            phi[(x, 1)] = model.stop_costs()[x];
        }
        for j in 2..d {
            for x in 0..n {
                phi[(x, j)] = rng.random_range(-1.0..=1.0);
            }
        }
        Self::new(phi, format!("random:{d}:{seed}"))
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `psi(x)` as a slice.
    #[inline]
    pub fn row(&self, x: usize) -> &[f64] {
        let d = self.phi.ncols();
        &self.rows[x * d..(x + 1) * d]
    }
}

impl FeatureMap<usize> for MatrixBasis {
    fn dim(&self) -> usize {
        self.phi.ncols()
    }

    #[inline]
    fn eval_into(&self, x: &usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(*x));
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Summary statistics of a ratio vector that basis functions combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Primitive {
    One,
    /// `x(L)`, the reward coordinate.
    Last,
    Min,
    Max,
    Mean,
    /// Mean over quartile window `k` in `0..4`.
    Quartile(u8),
    /// `sum_i (i - (L+1)/2) x(i) / L`, 1-based `i`.
    Slope,
    /// `sum_i 0.97^(L-i) x(i) (1 - 0.97)`.
    Ewma,
    /// A single coordinate, 1-based.
    Coord(usize),
}

const EWMA_DECAY: f64 = 0.97;

impl Primitive {
    pub fn parse(name: &str) -> Result<Self> {
        let p = match name {
            "one" => Self::One,
            "last" => Self::Last,
            "min" => Self::Min,
            "max" => Self::Max,
            "mean" => Self::Mean,
            "q1" => Self::Quartile(0),
            "q2" => Self::Quartile(1),
            "q3" => Self::Quartile(2),
            "q4" => Self::Quartile(3),
            "slope" => Self::Slope,
            "ewma" => Self::Ewma,
            other => match other.strip_prefix("coord:").map(str::parse::<usize>) {
                Some(Ok(i)) if i >= 1 => Self::Coord(i),
                _ => return Err(Error::Config(format!("unknown basis primitive '{other}'"))),
            },
        };
        Ok(p)
    }

    pub fn name(&self) -> String {
        match self {
            Self::One => "one".into(),
            Self::Last => "last".into(),
            Self::Min => "min".into(),
            Self::Max => "max".into(),
            Self::Mean => "mean".into(),
            Self::Quartile(k) => format!("q{}", k + 1),
            Self::Slope => "slope".into(),
            Self::Ewma => "ewma".into(),
            Self::Coord(i) => format!("coord:{i}"),
        }
    }
}

#[derive(Debug, Default)]
struct Summary {
    last: f64,
    min: f64,
    max: f64,
    mean: f64,
    quartiles: [f64; 4],
    slope: f64,
    ewma: f64,
}

fn summarize(x: &[f64]) -> Summary {
    let len = x.len();
    let lf = len as f64;
    let center = (lf + 1.0) / 2.0;
    let mut s = Summary {
        last: x[len - 1],
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut counts = [0usize; 4];
    let mut total = 0.0;
    let mut ewma = 0.0;
    for (i, &v) in x.iter().enumerate() {
        s.min = s.min.min(v);
        s.max = s.max.max(v);
        total += v;
        let k = (4 * i / len).min(3);
        s.quartiles[k] += v;
        counts[k] += 1;
        s.slope += ((i + 1) as f64 - center) * v;
        ewma = EWMA_DECAY * ewma + (1.0 - EWMA_DECAY) * v;
    }
    s.mean = total / lf;
    for (q, &c) in s.quartiles.iter_mut().zip(&counts) {
        if c > 0 {
            *q /= c as f64;
        }
    }
    s.slope /= lf;
    s.ewma = ewma;
    s
}

/// Basis over ratio vectors: each function is a linear combination of
/// [`Primitive`]s.
#[derive(Debug, Clone)]
pub struct RatioBasis {
    functions: Vec<Vec<(Primitive, f64)>>,
    label: String,
    needs_summary: bool,
}

/// JSON form of a custom ratio basis:
/// `{"label": "...", "functions": [{"one": 1.0}, {"last": 1.0, "min": -0.5}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioBasisDoc {
    #[serde(default)]
    pub label: Option<String>,
    pub functions: Vec<BTreeMap<String, f64>>,
}

impl RatioBasis {
    pub fn new(functions: Vec<Vec<(Primitive, f64)>>, label: impl Into<String>) -> Result<Self> {
        if functions.is_empty() || functions.iter().any(Vec::is_empty) {
            return Err(Error::Config("basis functions must be nonempty".into()));
        }
        let needs_summary = functions
            .iter()
            .flatten()
            .any(|(p, _)| !matches!(p, Primitive::One | Primitive::Coord(_)));
        Ok(Self {
            functions,
            label: label.into(),
            needs_summary,
        })
    }

    /// The default 10-function basis: constant, `x(L)`, min, max, the four
    /// quartile means, a linear-slope statistic and an exponentially weighted
    /// mean.
    pub fn finance_default() -> Self {
        let prims = [
            Primitive::One,
            Primitive::Last,
            Primitive::Min,
            Primitive::Max,
            Primitive::Quartile(0),
            Primitive::Quartile(1),
            Primitive::Quartile(2),
            Primitive::Quartile(3),
            Primitive::Slope,
            Primitive::Ewma,
        ];
        Self::new(prims.iter().map(|&p| vec![(p, 1.0)]).collect(), "finance10").expect("default basis is valid")
    }

    pub fn from_doc(doc: &RatioBasisDoc) -> Result<Self> {
        let functions = doc
            .functions
            .iter()
            .map(|f| {
                f.iter()
                    .map(|(name, &coef)| Primitive::parse(name).map(|p| (p, coef)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(functions, doc.label.clone().unwrap_or_else(|| "custom".into()))
    }

    /// Largest coordinate index referenced by a `coord:<i>` primitive.
    pub fn max_coord(&self) -> usize {
        self.functions
            .iter()
            .flatten()
            .filter_map(|(p, _)| match p {
                Primitive::Coord(i) => Some(*i),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn eval_ratios(&self, x: &[f64], out: &mut [f64]) {
        let s = if self.needs_summary {
            summarize(x)
        } else {
            Summary::default()
        };
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f
                .iter()
                .map(|(p, coef)| {
                    coef * match *p {
                        Primitive::One => 1.0,
                        Primitive::Last => s.last,
                        Primitive::Min => s.min,
                        Primitive::Max => s.max,
                        Primitive::Mean => s.mean,
                        Primitive::Quartile(k) => s.quartiles[k as usize],
                        Primitive::Slope => s.slope,
                        Primitive::Ewma => s.ewma,
                        Primitive::Coord(i) => x[i - 1],
                    }
                })
                .sum();
        }
    }
}

impl FeatureMap<[f64]> for RatioBasis {
    fn dim(&self) -> usize {
        self.functions.len()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.eval_ratios(x, out);
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

impl FeatureMap<GbmState> for RatioBasis {
    fn dim(&self) -> usize {
        self.functions.len()
    }
    #[inline]
    fn eval_into(&self, x: &GbmState, out: &mut [f64]) {
        self.eval_ratios(x.ratios(), out);
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    #[test]
    fn q_value_basics() {
        let basis = MatrixBasis::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]], "t").unwrap();
        for x in 0..3 {
            assert_eq!(q_value(&DVector::zeros(2), &basis, &x).unwrap(), 0.0);
            assert_eq!(q_value(&dvector![0.0, 1.0], &basis, &x).unwrap(), basis.row(x)[1]);
        }
        assert!(matches!(
            q_value(&DVector::zeros(3), &basis, &0),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        let tab = MatrixBasis::tabular(4);
        let v = dvector![4.0, -2.0, 0.25, 9.0];
        for x in 0..4 {
            assert_eq!(q_value(&v, &tab, &x).unwrap(), v[x]);
        }
    }

    #[test]
    fn policy_ties_stop() {
        let tab = MatrixBasis::tabular(2);
        let theta = dvector![0.7, 0.0];
        assert_eq!(policy(&theta, &tab, &0, 0.7).unwrap(), Decision::Stop);
        let zero = DVector::zeros(2);
        assert_eq!(policy(&zero, &tab, &1, -1.0).unwrap(), Decision::Stop);
        assert_eq!(policy(&zero, &tab, &1, 1.0).unwrap(), Decision::Continue);
        assert_eq!(s_theta_indicator(&zero, &tab, &1, 1.0).unwrap(), 1);
        assert_eq!(s_theta_indicator(&zero, &tab, &1, -1.0).unwrap(), 0);
    }

    #[test]
    fn finance_basis_shape() {
        let b = RatioBasis::finance_default();
        assert_eq!(FeatureMap::<[f64]>::dim(&b), 10);
        let ones = vec![1.0; 100];
        let psi = FeatureMap::<[f64]>::eval(&b, ones.as_slice());
        assert_eq!(psi[0], 1.0);
        // Flat history: every summary is one except the centred slope.
        for (i, v) in psi.iter().enumerate() {
            let expect = match i {
                8 => 0.0,
                9 => 1.0 - EWMA_DECAY.powi(100),
                _ => 1.0,
            };
            assert!((v - expect).abs() < 1e-12, "feature {i}: {v}");
        }
        let ramp: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let psi = FeatureMap::<[f64]>::eval(&b, ramp.as_slice());
        assert_eq!(psi[1], 100.0);
        assert_eq!(psi[2], 1.0);
        assert_eq!(psi[3], 100.0);
        assert!((psi[4] - 13.0).abs() < 1e-12);
        assert!((psi[7] - 88.0).abs() < 1e-12);
        // sum (i - 50.5) i / 100 = sum (i - 50.5)^2 / 100
        let expect: f64 = (1..=100).map(|i| (i as f64 - 50.5).powi(2)).sum::<f64>() / 100.0;
        assert!((psi[8] - expect).abs() < 1e-9);
    }

    #[test]
    fn custom_ratio_basis_parses() {
        let doc: RatioBasisDoc = serde_json::from_str(
            r#"{"label": "mine", "functions": [{"one": 1.0}, {"last": 2.0, "min": -1.0}, {"coord:3": 1.0}]}"#,
        )
        .unwrap();
        let b = RatioBasis::from_doc(&doc).unwrap();
        assert_eq!(b.max_coord(), 3);
        let x = [1.0, 2.0, 3.0, 4.0];
        let psi = FeatureMap::<[f64]>::eval(&b, x.as_slice());
        assert_eq!(psi.as_slice(), &[1.0, 7.0, 3.0]);
        let bad: RatioBasisDoc = serde_json::from_str(r#"{"functions": [{"nope": 1.0}]}"#).unwrap();
        assert!(RatioBasis::from_doc(&bad).is_err());
    }

    proptest! {
        #[test]
        fn q_value_is_linear(
            a in -10.0..10.0f64, b in -10.0..10.0f64,
            t1 in proptest::collection::vec(-5.0..5.0f64, 3),
            t2 in proptest::collection::vec(-5.0..5.0f64, 3),
            x in 0usize..4,
        ) {
            let basis = MatrixBasis::from_rows(
                &[vec![1.0, 0.3, -2.0], vec![0.1, 4.0, 1.0], vec![-1.0, 1.0, 1.0], vec![2.5, 0.0, 0.7]], "p").unwrap();
            let t1 = DVector::from_vec(t1);
            let t2 = DVector::from_vec(t2);
            let lhs = q_value(&(&t1 * a + &t2 * b), &basis, &x).unwrap();
            let rhs = a * q_value(&t1, &basis, &x).unwrap() + b * q_value(&t2, &basis, &x).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn policy_and_indicator_are_complementary(
            theta in proptest::collection::vec(-3.0..3.0f64, 2),
            x in 0usize..2,
            cs in -5.0..5.0f64,
        ) {
            let basis = MatrixBasis::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]], "p").unwrap();
            let theta = DVector::from_vec(theta);
            let stop = policy(&theta, &basis, &x, cs).unwrap().indicator();
            let s = s_theta_indicator(&theta, &basis, &x, cs).unwrap();
            prop_assert_eq!(stop + s, 1);
        }
    }
}
