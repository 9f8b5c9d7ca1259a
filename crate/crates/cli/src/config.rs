//! TOML run configuration and the model, family and dataset builders derived
//! from it.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twisted_smc::filters::{derive_seed, FilterKind, FilterSpec};
use twisted_smc::gauss::Gaussian;
use twisted_smc::pmcmc::{MhConfig, Prior, PriorSpec};
use twisted_smc::resample::Resampler;
use twisted_smc::ssm::{
    linear_gaussian_model, range_bearing_model_with_prior, range_bearing_prior, rss_model, sample_visibility, simulate,
    Dataset, GaussianSsm, RssSpec,
};

use crate::error::CliError;

/// Seed stream reserved for drawing RSS visibility patterns.
const VISIBILITY_STREAM: u64 = 0x7669_7369;

pub type DynModel = Box<dyn GaussianSsm>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Used when `--seed` is not given.
    #[serde(default)]
    pub seed: u64,
    /// Final time index; datasets have `t + 1` rows.
    pub t: usize,
    /// Number of datasets written by `simulate`.
    #[serde(default = "one")]
    pub datasets: usize,
    /// Dataset CSV read by `varz`, `pmmh` and `track`; simulated from the
    /// model when absent. Relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub filter: FilterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varz: Option<VarzConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmmh: Option<PmmhConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<TrackConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `x' = A x + w`, `y = H x + v`. PMMH parameters scale `Q` and `R`.
    Linear {
        a: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        nu0: Vec<f64>,
        p0: Vec<Vec<f64>>,
    },
    RangeBearing {
        q2: f64,
        sigma1sq: f64,
        sigma2sq: f64,
        #[serde(default = "unit_dt")]
        dt: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nu0: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p0_diag: Option<Vec<f64>>,
    },
    Rss {
        stations: Vec<[f64; 2]>,
        lambdas: Vec<f64>,
        rhos: Vec<f64>,
        sigma2: f64,
        q2: f64,
        #[serde(default = "unit_dt")]
        dt: f64,
        nu0: Vec<f64>,
        p0_diag: Vec<f64>,
        /// Explicit visible-station sets per time step.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visibility: Option<Vec<Vec<usize>>>,
        /// Probability that each station is visible, used when no explicit
        /// sets are given. All stations are visible when both are absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visibility_p: Option<f64>,
    },
}

fn unit_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub resampling: Resampler,
    pub n: usize,
    #[serde(default)]
    pub l: usize,
    #[serde(default = "yes")]
    pub relinearize: bool,
}

impl FilterConfig {
    pub fn spec(&self) -> FilterSpec {
        FilterSpec {
            relinearize: self.relinearize,
            ..FilterSpec::new(self.kind, self.resampling, self.n, self.l)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarzConfig {
    pub filters: Vec<FilterKind>,
    pub resampling: Vec<Resampler>,
    pub n: Vec<usize>,
    /// Lookahead values; untwisted filters get a single row with `l = 0`.
    #[serde(default = "zero_lookahead")]
    pub l: Vec<usize>,
    pub replicates: usize,
    /// Record mean wall time per run. Off by default so outputs are
    /// reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
}

fn zero_lookahead() -> Vec<usize> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// The particle filter from `[filter]`.
    Filter,
    /// Exact Kalman likelihood (linear models only).
    Kalman,
    /// Deterministic EKF approximation.
    Ekf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmmhConfig {
    pub iterations: usize,
    #[serde(default)]
    pub burn_in: usize,
    /// Partition of parameter indices; one joint block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Vec<usize>>>,
    /// Random-walk covariance per block.
    pub proposal_cov: Vec<Vec<Vec<f64>>>,
    /// Defaults exist for the range-bearing and RSS models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<Prior>>,
    /// Starting point; drawn from the prior when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
}

fn default_estimator() -> Estimator {
    Estimator::Filter
}

fn default_max_lag() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    /// Explicit parameter vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Chain CSV whose post-burn-in mean supplies the parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<PathBuf>,
    #[serde(default)]
    pub burn_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dataset_prefix")]
    pub dataset_prefix: String,
    #[serde(default = "default_varz")]
    pub varz: String,
    #[serde(default = "default_chain")]
    pub chain: String,
    #[serde(default = "default_metrics")]
    pub metrics: String,
    #[serde(default = "default_autocorr_prefix")]
    pub autocorr_prefix: String,
}

fn default_dataset_prefix() -> String {
    "dataset".into()
}
fn default_varz() -> String {
    "varz.csv".into()
}
fn default_chain() -> String {
    "chain.csv".into()
}
fn default_metrics() -> String {
    "metrics.csv".into()
}
fn default_autocorr_prefix() -> String {
    "autocorr".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dataset_prefix: default_dataset_prefix(),
            varz: default_varz(),
            chain: default_chain(),
            metrics: default_metrics(),
            autocorr_prefix: default_autocorr_prefix(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(bad(format!("`{name}` must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn diag_gaussian(nu0: &[f64], p0_diag: &[f64]) -> Result<Gaussian, CliError> {
    if nu0.len() != p0_diag.len() {
        return Err(bad("`nu0` and `p0_diag` lengths differ"));
    }
    Ok(Gaussian::new(
        DVector::from_column_slice(nu0),
        DMatrix::from_diagonal(&DVector::from_column_slice(p0_diag)),
    )?)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [cfg.data.as_mut(), cfg.track.as_mut().and_then(|t| t.chain.as_mut())].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.t < 1 {
            return Err(bad("t must be at least 1"));
        }
        if self.filter.n < 1 {
            return Err(bad("filter.n must be at least 1"));
        }
        if self.datasets < 1 {
            return Err(bad("datasets must be at least 1"));
        }
        if let Some(v) = &self.varz {
            if v.filters.is_empty() || v.resampling.is_empty() || v.n.is_empty() || v.l.is_empty() {
                return Err(bad("varz grid axes must be non-empty"));
            }
            if v.n.iter().any(|&n| n < 1) {
                return Err(bad("varz.n entries must be at least 1"));
            }
            if v.replicates < 2 {
                return Err(bad("varz.replicates must be at least 2"));
            }
        }
        if let Some(p) = &self.pmmh {
            if p.iterations < 1 {
                return Err(bad("pmmh.iterations must be at least 1"));
            }
        }
        if let ModelConfig::Rss { stations, lambdas, rhos, visibility_p: Some(p), .. } = &self.model {
            if !(0.0..=1.0).contains(p) {
                return Err(bad("visibility_p must lie in [0, 1]"));
            }
            if stations.len() != lambdas.len() || stations.len() != rhos.len() {
                return Err(bad("stations, lambdas and rhos lengths differ"));
            }
        }
        Ok(())
    }

    /// Parameter names of the PMMH family.
    pub fn theta_names(&self) -> Vec<String> {
        match &self.model {
            ModelConfig::Linear { .. } => vec!["q_scale".into(), "r_scale".into()],
            ModelConfig::RangeBearing { .. } => vec!["q2".into(), "sigma1sq".into(), "sigma2sq".into()],
            ModelConfig::Rss { stations, .. } => {
                let mut names = Vec::new();
                for i in 1..=stations.len() {
                    names.push(format!("lambda{i}"));
                    names.push(format!("rho{i}"));
                }
                names.push("q2".into());
                names.push("sigma2".into());
                names
            }
        }
    }

    /// The configured parameter values, in [`RunConfig::theta_names`] order.
    pub fn theta_truth(&self) -> Vec<f64> {
        match &self.model {
            ModelConfig::Linear { .. } => vec![1.0, 1.0],
            ModelConfig::RangeBearing { q2, sigma1sq, sigma2sq, .. } => vec![*q2, *sigma1sq, *sigma2sq],
            ModelConfig::Rss { lambdas, rhos, q2, sigma2, .. } => {
                let mut v: Vec<f64> = lambdas.iter().zip(rhos).flat_map(|(l, r)| [*l, *r]).collect();
                v.push(*q2);
                v.push(*sigma2);
                v
            }
        }
    }

    /// Visible-station sets for `t + 1` steps, if the model has any.
    pub fn visibility(&self, seed: u64) -> Option<Vec<Vec<usize>>> {
        match &self.model {
            ModelConfig::Rss { stations, visibility, visibility_p, .. } => Some(match (visibility, visibility_p) {
                (Some(v), _) => v.clone(),
                (None, Some(p)) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, VISIBILITY_STREAM));
                    sample_visibility(stations.len(), self.t + 1, *p, &mut rng)
                }
                (None, None) => vec![(0..stations.len()).collect(); self.t + 1],
            }),
            _ => None,
        }
    }

    /// Builds the model at parameter vector `theta`.
    pub fn build(&self, theta: &[f64], visibility: Option<&[Vec<usize>]>) -> Result<DynModel, CliError> {
        if theta.len() != self.theta_names().len() {
            return Err(bad(format!("expected {} parameters, got {}", self.theta_names().len(), theta.len())));
        }
        Ok(match &self.model {
            ModelConfig::Linear { a, q, h, r, nu0, p0 } => Box::new(linear_gaussian_model(
                matrix("a", a)?,
                matrix("q", q)? * theta[0],
                matrix("h", h)?,
                matrix("r", r)? * theta[1],
                DVector::from_column_slice(nu0),
                matrix("p0", p0)?,
            )?),
            ModelConfig::RangeBearing { dt, nu0, p0_diag, .. } => {
                let init = match (nu0, p0_diag) {
                    (None, None) => range_bearing_prior(),
                    (Some(m), Some(p)) => diag_gaussian(m, p)?,
                    _ => return Err(bad("give both nu0 and p0_diag or neither")),
                };
                Box::new(range_bearing_model_with_prior(theta[0], theta[1], theta[2], *dt, init)?)
            }
            ModelConfig::Rss { stations, dt, nu0, p0_diag, .. } => {
                let m = stations.len();
                let visibility = visibility.ok_or_else(|| bad("RSS model needs a visibility pattern"))?;
                if visibility.iter().flatten().any(|&s| s >= m) {
                    return Err(bad("visibility refers to a missing station"));
                }
                Box::new(rss_model(RssSpec {
                    lambdas: (0..m).map(|i| theta[2 * i]).collect(),
                    rhos: (0..m).map(|i| theta[2 * i + 1]).collect(),
                    q2: theta[2 * m],
                    sigma2: theta[2 * m + 1],
                    stations: stations.clone(),
                    visibility: visibility.to_vec(),
                    dt: *dt,
                    init: diag_gaussian(nu0, p0_diag)?,
                })?)
            }
        })
    }

    /// Prior over the PMMH parameters.
    pub fn prior(&self) -> Result<PriorSpec, CliError> {
        let p = self.pmmh.as_ref().ok_or_else(|| bad("missing [pmmh] section"))?;
        let prior = match (&p.priors, &self.model) {
            (Some(v), _) => PriorSpec(v.clone()),
            (None, ModelConfig::RangeBearing { .. }) => PriorSpec::range_bearing(),
            (None, ModelConfig::Rss { stations, .. }) => PriorSpec::rss(stations.len()),
            (None, ModelConfig::Linear { .. }) => return Err(bad("linear models need explicit pmmh.priors")),
        };
        if prior.len() != self.theta_names().len() {
            return Err(bad(format!("{} priors for {} parameters", prior.len(), self.theta_names().len())));
        }
        prior.validate()?;
        Ok(prior)
    }

    pub fn mh_config(&self) -> Result<MhConfig, CliError> {
        let p = self.pmmh.as_ref().ok_or_else(|| bad("missing [pmmh] section"))?;
        let d = self.theta_names().len();
        let blocks = p.blocks.clone().unwrap_or_else(|| vec![(0..d).collect()]);
        let proposal_cov = p
            .proposal_cov
            .iter()
            .enumerate()
            .map(|(i, m)| matrix(&format!("proposal_cov[{i}]"), m))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = MhConfig {
            iterations: p.iterations,
            burn_in: p.burn_in,
            blocks,
            proposal_cov,
        };
        cfg.validate(d)?;
        Ok(cfg)
    }

    /// The configured dataset, or a simulation at the configured parameters.
    pub fn dataset(&self, seed: u64) -> Result<Dataset, CliError> {
        match &self.data {
            Some(path) => {
                let file = std::fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
                Ok(Dataset::read_csv(file)?)
            }
            None => self.simulate(seed, 0),
        }
    }

    /// Dataset number `index` of a simulation run.
    pub fn simulate(&self, seed: u64, index: u64) -> Result<Dataset, CliError> {
        let visibility = self.visibility(seed);
        let model = self.build(&self.theta_truth(), visibility.as_deref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
        Ok(simulate(&model, self.t, &mut rng)?)
    }

    /// Visibility implied by a dataset's missing columns, falling back to
    /// the configured pattern.
    pub fn visibility_for(&self, data: &Dataset, seed: u64) -> Option<Vec<Vec<usize>>> {
        match (&self.model, &data.layout) {
            (ModelConfig::Rss { .. }, Some(layout)) => Some(layout.visible.clone()),
            (ModelConfig::Rss { stations, .. }, None) if data.observations.iter().all(|y| y.len() == stations.len()) => {
                Some(vec![(0..stations.len()).collect(); data.len()])
            }
            _ => self.visibility(seed),
        }
    }
}
