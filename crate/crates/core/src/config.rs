//! Experiment configuration files.
//!
//! A configuration is a TOML document with `[chain]`, `[basis]`,
//! `[algorithm]` and `[run]` sections and optional `[snapshots]`, `[eval]`,
//! `[analysis]` and `[output]` sections:
//!
//! ```toml
//! [chain]
//! kind = "finite"
//! n_states = 10
//! seed = 7
//! beta = 0.95
//!
//! [basis]
//! name = "random:4:1"
//!
//! [algorithm]
//! gain = "zap"
//! alpha = { kind = "harmonic" }
//! gamma = { kind = "polynomial", rho = 0.85 }
//!
//! [run]
//! n_iterations = 1000000
//! replicas = 20
//! seed = 1
//! ```
//!
//! Relative file paths are resolved against the directory of the
//! configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chain::{FiniteChainDoc, FiniteChainModel, GbmRatioChain, StartState};
use crate::error::{Error, Result};
use crate::features::{MatrixBasis, RatioBasis, RatioBasisDoc};
use crate::gains::{GainStrategy, StepSizeSchedule, DEFAULT_REL_THRESHOLD};
use crate::learner::{LearnerSettings, SnapshotPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub chain: ChainSpec,
    pub basis: BasisSpec,
    pub algorithm: AlgorithmSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub snapshots: SnapshotSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChainSpec {
    /// A chain read from a JSON file, or a random one.
    Finite {
        #[serde(default)]
        file: Option<PathBuf>,
        #[serde(default)]
        n_states: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
        /// Overrides the file's discount factor; required for random chains.
        #[serde(default)]
        beta: Option<f64>,
        #[serde(default)]
        start: StartState,
    },
    Finance {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_drift")]
        drift: f64,
        #[serde(default = "default_finance_beta")]
        beta: f64,
    },
}

fn default_window() -> usize {
    GbmRatioChain::default().window
}
fn default_sigma() -> f64 {
    GbmRatioChain::default().sigma
}
fn default_drift() -> f64 {
    GbmRatioChain::default().drift
}
fn default_finance_beta() -> f64 {
    GbmRatioChain::default().beta
}

/// `name` is one of `tabular`, `random:<d>:<seed>`, `matrix:<file>`
/// (finite chains) or `finance10`, `custom:<file>` (finance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub gain: GainStrategy,
    pub alpha: StepSizeSchedule,
    #[serde(default)]
    pub gamma: Option<StepSizeSchedule>,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub gain_init_scale: f64,
    #[serde(default = "default_rel")]
    pub rel_threshold: f64,
    #[serde(default)]
    pub eigen_clamp: Option<f64>,
    #[serde(default)]
    pub divergence_radius: Option<f64>,
}

fn one() -> f64 {
    1.0
}
fn default_rel() -> f64 {
    DEFAULT_REL_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub n_iterations: u64,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSpec {
    #[serde(default)]
    pub plan: SnapshotPlan,
    #[serde(default)]
    pub record_gain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub n_runs: usize,
    /// Defaults to the smallest `T` with `beta^T < 1e-6`.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub bins: usize,
    /// Start state of a finite chain; finance always starts flat.
    #[serde(default)]
    pub start: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_runs: 1000,
            horizon: None,
            seed: 0,
            bins: 30,
            start: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Trajectory length for `Sigma_eps` (and Monte-Carlo `A` on finance).
    pub noise_samples: usize,
    /// Defaults to `ceil(sqrt(noise_samples))`.
    #[serde(default)]
    pub batches: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Run record whose final parameter stands in for `theta*`. Finite
    /// chains use the exact fixed point when absent.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Coordinate of the scaled-error histogram.
    #[serde(default)]
    pub coord: usize,
    pub bins: usize,
    pub ode_horizon: f64,
    pub ode_starts: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            noise_samples: 1_000_000,
            batches: None,
            seed: 0,
            reference: None,
            coord: 0,
            bins: 30,
            ode_horizon: 2.0,
            ode_starts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// A resolved chain and basis.
#[derive(Debug, Clone)]
pub enum Experiment {
    Finite {
        model: FiniteChainModel,
        basis: MatrixBasis,
    },
    Finance {
        chain: GbmRatioChain,
        basis: RatioBasis,
    },
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The effective configuration as JSON, for embedding in artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.n_iterations < 1 {
            return Err(Error::Config("run.n_iterations must be at least 1".into()));
        }
        if self.run.replicas < 1 {
            return Err(Error::Config("run.replicas must be at least 1".into()));
        }
        if self.eval.n_runs < 1 || self.eval.bins < 1 || self.analysis.bins < 1 {
            return Err(Error::Config("eval.n_runs and bins must be at least 1".into()));
        }
        if !(self.analysis.ode_horizon >= 0.0) {
            return Err(Error::Config("analysis.ode_horizon must be nonnegative".into()));
        }
        if let ChainSpec::Finite {
            file,
            n_states,
            seed,
            beta,
            ..
        } = &self.chain
        {
            match (file, n_states) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config("chain: give either file or n_states, not both".into()))
                }
                (None, None) => return Err(Error::Config("chain: need file or n_states".into())),
                (None, Some(_)) if seed.is_none() || beta.is_none() => {
                    return Err(Error::Config("random chain needs seed and beta".into()))
                }
                _ => {}
            }
        }
        // theta0's length is checked against the basis in `resolve`.
        let settings = self.learner_settings();
        settings.validate(settings.theta0.as_ref().map_or(0, Vec::len))
    }

    pub fn learner_settings(&self) -> LearnerSettings {
        let a = &self.algorithm;
        LearnerSettings {
            gain: a.gain,
            alpha: a.alpha,
            gamma: a.gamma,
            n_iterations: self.run.n_iterations,
            theta0: a.theta0.clone(),
            gain_init_scale: a.gain_init_scale,
            rel_threshold: a.rel_threshold,
            eigen_clamp: a.eigen_clamp,
            divergence_radius: a.divergence_radius,
            snapshots: self.snapshots.plan,
            record_gain: self.snapshots.record_gain,
        }
    }

    pub fn resolve(&self) -> Result<Experiment> {
        let exp = match &self.chain {
            ChainSpec::Finite {
                file,
                n_states,
                seed,
                beta,
                start,
            } => {
                let mut model = match (file, n_states) {
                    (Some(f), None) => {
                        let path = self.resolve_path(f);
                        let text = std::fs::read_to_string(&path)
                            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                        let doc: FiniteChainDoc = serde_json::from_str(&text)?;
                        let m = FiniteChainModel::from_doc(&doc)?;
                        match beta {
                            Some(b) => m.with_beta(*b)?,
                            None => m,
                        }
                    }
                    (None, Some(n)) => {
                        crate::chain::random_finite_chain(*n, seed.unwrap_or_default(), beta.unwrap_or_default())?
                    }
                    _ => unreachable!("validated"),
                };
                model = model.with_start(*start)?;
                let basis = self.finite_basis(&model)?;
                Experiment::Finite { model, basis }
            }
            ChainSpec::Finance {
                window,
                sigma,
                drift,
                beta,
            } => {
                let chain = GbmRatioChain {
                    window: *window,
                    sigma: *sigma,
                    drift: *drift,
                    beta: *beta,
                };
                chain.validate()?;
                let basis = self.finance_basis()?;
                if basis.max_coord() > chain.window {
                    return Err(Error::Config(format!(
                        "basis uses coordinate {} but the window is {}",
                        basis.max_coord(),
                        chain.window
                    )));
                }
                Experiment::Finance { chain, basis }
            }
        };
        if let Some(t) = &self.algorithm.theta0 {
            crate::error::check_dim(exp.dim(), t.len())?;
        }
        Ok(exp)
    }

    fn finite_basis(&self, model: &FiniteChainModel) -> Result<MatrixBasis> {
        let name = self.basis.name.as_str();
        if name == "tabular" {
            return Ok(MatrixBasis::tabular(model.n_states()));
        }
        if let Some(rest) = name.strip_prefix("random:") {
            let (d, seed) = rest
                .split_once(':')
                .and_then(|(d, s)| Some((d.parse().ok()?, s.parse().ok()?)))
                .ok_or_else(|| Error::Config(format!("bad basis name {name:?}; expected random:<d>:<seed>")))?;
            return MatrixBasis::random_with_stop_cost(model, d, seed);
        }
        if let Some(file) = name.strip_prefix("matrix:") {
            let path = self.resolve_path(Path::new(file));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
            return MatrixBasis::from_rows(&rows, name);
        }
        Err(Error::Config(format!("unknown basis {name:?} for a finite chain")))
    }

    fn finance_basis(&self) -> Result<RatioBasis> {
        let name = self.basis.name.as_str();
        if name == "finance10" {
            return Ok(RatioBasis::finance_default());
        }
        if let Some(file) = name.strip_prefix("custom:") {
            let path = self.resolve_path(Path::new(file));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let doc: RatioBasisDoc = serde_json::from_str(&text)?;
            return RatioBasis::from_doc(&doc);
        }
        Err(Error::Config(format!("unknown basis {name:?} for the finance chain")))
    }
}

impl Experiment {
    pub fn dim(&self) -> usize {
        use crate::features::FeatureMap;
        match self {
            Self::Finite { basis, .. } => FeatureMap::<usize>::dim(basis),
            Self::Finance { basis, .. } => FeatureMap::<[f64]>::dim(basis),
        }
    }

    pub fn basis_label(&self) -> String {
        use crate::features::FeatureMap;
        match self {
            Self::Finite { basis, .. } => FeatureMap::<usize>::label(basis),
            Self::Finance { basis, .. } => FeatureMap::<[f64]>::label(basis),
        }
    }
}
