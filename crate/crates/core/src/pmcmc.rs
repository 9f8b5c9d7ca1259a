//! Particle marginal Metropolis-Hastings with blockwise Gaussian random-walk
//! updates, and the priors used with it.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gauss::{chol_psd, Factor, LN_2PI};
use crate::ssm::{Dataset, ModelFamily};

/// Prior of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Prior {
    /// Density `∝ x^{−a−1} e^{−b/x}` on `x > 0`.
    InverseGamma { a: f64, b: f64 },
    /// Density `∝ x^{shape−1} e^{−x/scale}` on `x > 0`.
    Gamma { shape: f64, scale: f64 },
    Normal { mean: f64, var: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::InverseGamma { a, b } => a > 0.0 && b > 0.0,
            Prior::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            Prior::Normal { mean, var } => mean.is_finite() && var > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid prior hyperparameters {self:?}")))
        }
    }

    /// Log density, `−∞` outside the support.
    pub fn logpdf(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::InverseGamma { a, b } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
            }
            Prior::Gamma { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                -ln_gamma(shape) - shape * scale.ln() + (shape - 1.0) * x.ln() - x / scale
            }
            Prior::Normal { mean, var } => -0.5 * (LN_2PI + var.ln()) - 0.5 * (x - mean).powi(2) / var,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::InverseGamma { a, b } => 1.0 / Gamma::new(a, 1.0 / b).expect("validated prior").sample(rng),
            Prior::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated prior").sample(rng),
            Prior::Normal { mean, var } => Normal::new(mean, var.sqrt()).expect("validated prior").sample(rng),
        }
    }
}

/// Independent priors, one per parameter in family order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec(pub Vec<Prior>);

impl PriorSpec {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.0.iter().try_for_each(Prior::validate)
    }

    pub fn logpdf(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.0.len() {
            return f64::NEG_INFINITY;
        }
        self.0.iter().zip(theta).map(|(p, x)| p.logpdf(*x)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.0.iter().map(|p| p.sample(rng)).collect()
    }

    /// Range-bearing priors on `(q², σ₁², σ₂²)`.
    pub fn range_bearing() -> Self {
        PriorSpec(vec![
            Prior::InverseGamma { a: 1.0, b: 0.01 },
            Prior::InverseGamma { a: 0.1, b: 0.1 },
            Prior::InverseGamma { a: 0.1, b: 0.1 },
        ])
    }

    /// RSS priors on `(λ₁, ρ₁, …, λ_m, ρ_m, q², σ²)`.
    pub fn rss(stations: usize) -> Self {
        let mut v = Vec::with_capacity(2 * stations + 2);
        for _ in 0..stations {
            v.push(Prior::Gamma { shape: 3.8, scale: 1.6 });
            v.push(Prior::Normal { mean: 0.0, var: 4900.0 });
        }
        v.push(Prior::InverseGamma { a: 1.0, b: 0.01 });
        v.push(Prior::InverseGamma { a: 0.1, b: 0.1 });
        PriorSpec(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhConfig {
    /// Chain length including the initial state.
    pub iterations: usize,
    /// Leading draws discarded by [`Chain::post_burn_in`].
    pub burn_in: usize,
    /// Partition of parameter indices, updated in order.
    pub blocks: Vec<Vec<usize>>,
    /// Random-walk covariance of each block.
    pub proposal_cov: Vec<DMatrix<f64>>,
}

impl MhConfig {
    /// One block holding every parameter.
    pub fn joint(iterations: usize, burn_in: usize, cov: DMatrix<f64>) -> Self {
        Self {
            iterations,
            burn_in,
            blocks: vec![(0..cov.nrows()).collect()],
            proposal_cov: vec![cov],
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("need at least one iteration".into()));
        }
        if self.blocks.len() != self.proposal_cov.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} blocks with {} proposal covariances",
                self.blocks.len(),
                self.proposal_cov.len()
            )));
        }
        let mut seen = vec![false; dim];
        for (b, c) in self.blocks.iter().zip(&self.proposal_cov) {
            if c.nrows() != b.len() || c.ncols() != b.len() {
                return Err(Error::ShapeMismatch(format!("block of size {} with {}x{} covariance", b.len(), c.nrows(), c.ncols())));
            }
            for &i in b {
                if i >= dim || seen[i] {
                    return Err(Error::InvalidParameter("blocks must partition the parameters".into()));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter("blocks must partition the parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    /// Row `i` is the state after iteration `i`; row 0 is the initial state.
    pub draws: Vec<Vec<f64>>,
    pub log_z: Vec<f64>,
    /// Per iteration, whether each block's proposal was accepted.
    pub accepted: Vec<Vec<bool>>,
    pub burn_in: usize,
    /// Estimator failures, each counted as a rejection.
    pub failures: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Draws of parameter `j` after burn-in.
    pub fn trace(&self, j: usize) -> Vec<f64> {
        self.draws.iter().skip(self.burn_in).map(|r| r[j]).collect()
    }

    pub fn post_burn_in(&self) -> &[Vec<f64>] {
        &self.draws[self.burn_in.min(self.draws.len())..]
    }

    /// Posterior mean after burn-in.
    pub fn mean(&self) -> Vec<f64> {
        let rows = self.post_burn_in();
        let d = self.names.len();
        let mut m = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                m[j] += r[j];
            }
        }
        m.iter().map(|x| x / rows.len().max(1) as f64).collect()
    }

    /// Acceptance rate of each block over iterations `1..`.
    pub fn acceptance_rates(&self) -> Vec<f64> {
        let blocks = self.accepted.first().map_or(0, Vec::len);
        let moves = self.accepted.len().saturating_sub(1).max(1) as f64;
        (0..blocks)
            .map(|b| self.accepted.iter().skip(1).filter(|a| a[b]).count() as f64 / moves)
            .collect()
    }

    /// Writes `iter,logZ,acc_b1..,theta names..`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Dataset(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let blocks = self.accepted.first().map_or(0, Vec::len);
        let mut header = vec!["iter".to_string(), "logZ".to_string()];
        header.extend((1..=blocks).map(|b| format!("acc_b{b}")));
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (i, row) in self.draws.iter().enumerate() {
            let mut rec = vec![i.to_string(), format!("{:?}", self.log_z[i])];
            rec.extend(self.accepted[i].iter().map(|a| u8::from(*a).to_string()));
            rec.extend(row.iter().map(|x| format!("{x:?}")));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Dataset(e.to_string()))
    }
}

/// Runs PMMH. The chain starts from `theta0` if given, otherwise from prior
/// draws until the estimator returns a finite value. `estimator` receives the
/// model for a proposed parameter and returns a log-likelihood estimate.
pub fn pmmh<F, E, R>(
    family: &F,
    mut estimator: E,
    prior: &PriorSpec,
    cfg: &MhConfig,
    data: &Dataset,
    theta0: Option<Vec<f64>>,
    rng: &mut R,
) -> Result<Chain>
where
    F: ModelFamily + ?Sized,
    E: FnMut(&F::Model, &Dataset, &mut R) -> Result<f64>,
    R: Rng,
{
    let names = family.names();
    let d = names.len();
    if prior.len() != d {
        return Err(Error::ShapeMismatch(format!("{} priors for {d} parameters", prior.len())));
    }
    prior.validate()?;
    cfg.validate(d)?;
    let factors: Vec<Factor> = cfg.proposal_cov.iter().map(chol_psd).collect::<Result<_>>()?;

    let mut failures = 0usize;
    let mut evaluate = |theta: &[f64], rng: &mut R, failures: &mut usize| -> f64 {
        let out = family.build(theta).and_then(|m| estimator(&m, data, rng));
        match out {
            Ok(v) if !v.is_nan() => v,
            Ok(_) | Err(_) => {
                if let Err(e) = out {
                    log::warn!("likelihood estimate failed at {theta:?}: {e}");
                }
                *failures += 1;
                f64::NEG_INFINITY
            }
        }
    };

    let (mut theta, mut log_z) = match theta0 {
        Some(t) => {
            if t.len() != d {
                return Err(Error::ShapeMismatch(format!("initial value of length {} for {d} parameters", t.len())));
            }
            if prior.logpdf(&t) == f64::NEG_INFINITY {
                return Err(Error::InvalidParameter("initial value outside the prior support".into()));
            }
            let lz = evaluate(&t, rng, &mut failures);
            if !lz.is_finite() {
                return Err(Error::EstimatorFailure("no finite estimate at the initial value".into()));
            }
            (t, lz)
        }
        None => {
            const ATTEMPTS: usize = 1000;
            let mut found = None;
            for _ in 0..ATTEMPTS {
                let t = prior.sample(rng);
                let lz = evaluate(&t, rng, &mut failures);
                if lz.is_finite() {
                    found = Some((t, lz));
                    break;
                }
            }
            found.ok_or_else(|| Error::EstimatorFailure(format!("no finite estimate in {ATTEMPTS} prior draws")))?
        }
    };
    let mut log_prior = prior.logpdf(&theta);

    let blocks = cfg.blocks.len();
    let mut chain = Chain {
        names,
        draws: Vec::with_capacity(cfg.iterations),
        log_z: Vec::with_capacity(cfg.iterations),
        accepted: Vec::with_capacity(cfg.iterations),
        burn_in: cfg.burn_in,
        failures: 0,
    };
    chain.draws.push(theta.clone());
    chain.log_z.push(log_z);
    chain.accepted.push(vec![false; blocks]);

    for _ in 1..cfg.iterations {
        let mut acc = vec![false; blocks];
        for (b, (idx, factor)) in cfg.blocks.iter().zip(&factors).enumerate() {
            let z = DVector::from_iterator(idx.len(), (0..idx.len()).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
            let step = factor.color(&z);
            let mut prop = theta.clone();
            for (j, &i) in idx.iter().enumerate() {
                prop[i] += step[j];
            }
            let prop_prior = prior.logpdf(&prop);
            if prop_prior == f64::NEG_INFINITY {
                continue;
            }
            let prop_z = evaluate(&prop, rng, &mut failures);
            if prop_z == f64::NEG_INFINITY {
                continue;
            }
            let log_ratio = prop_z + prop_prior - log_z - log_prior;
            if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
                theta = prop;
                log_z = prop_z;
                log_prior = prop_prior;
                acc[b] = true;
            }
        }
        chain.draws.push(theta.clone());
        chain.log_z.push(log_z);
        chain.accepted.push(acc);
    }
    chain.failures = failures;
    if failures > 0 {
        log::warn!("{failures} likelihood estimates failed and were rejected");
    }
    Ok(chain)
}

/// Random-walk covariances for `blocks` from a pilot chain: the empirical
/// covariance of each block scaled by `2.38² / block size`.
pub fn pilot_proposal_cov(chain: &Chain, blocks: &[Vec<usize>]) -> Result<Vec<DMatrix<f64>>> {
    let rows = chain.post_burn_in();
    if rows.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: rows.len() });
    }
    let n = rows.len() as f64;
    let mean = chain.mean();
    Ok(blocks
        .iter()
        .map(|b| {
            let db = b.len();
            let mut c = DMatrix::zeros(db, db);
            for r in rows {
                for (p, &i) in b.iter().enumerate() {
                    for (q, &j) in b.iter().enumerate() {
                        c[(p, q)] += (r[i] - mean[i]) * (r[j] - mean[j]);
                    }
                }
            }
            c * (2.38f64.powi(2) / db as f64 / (n - 1.0))
        })
        .collect())
}
