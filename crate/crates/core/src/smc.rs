//! Standard particle filter with multinomial or systematic resampling at every
//! step and a bootstrap or EKF-based proposal.

use std::borrow::Cow;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{log_sum_exp, Gaussian};
use crate::kalman::{ekf_predict, ekf_update, FilterState};
use crate::resample::Resampler;
use crate::ssm::{Dataset, GaussianSsm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposalKind {
    /// `q_k = f_k`.
    Bootstrap,
    /// One EKF step from a point mass at the ancestor.
    Ekf,
}

impl FromStr for ProposalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(Self::Bootstrap),
            "ekf" => Ok(Self::Ekf),
            other => Err(Error::InvalidParameter(format!("unknown proposal `{other}`"))),
        }
    }
}

/// Proposal for one particle at one step.
#[derive(Debug, Clone)]
pub enum ParticleProposal<'a> {
    Bootstrap {
        mean: DVector<f64>,
        noise: Cow<'a, Gaussian>,
    },
    Gaussian(Gaussian),
}

impl ParticleProposal<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Bootstrap { mean, noise } => mean + noise.sample(rng),
            Self::Gaussian(g) => g.sample(rng),
        }
    }

    pub fn logpdf<M: GaussianSsm + ?Sized>(&self, model: &M, k: usize, prev: &DVector<f64>, x: &DVector<f64>) -> f64 {
        match self {
            Self::Bootstrap { .. } => model.transition_logpdf(k, prev, x),
            Self::Gaussian(g) => g.logpdf(x),
        }
    }

    /// `log f_k(x | prev) − log q_k(x | prev)`, exactly zero for the bootstrap.
    pub fn log_ratio<M: GaussianSsm + ?Sized>(&self, model: &M, k: usize, prev: &DVector<f64>, x: &DVector<f64>) -> f64 {
        match self {
            Self::Bootstrap { .. } => 0.0,
            Self::Gaussian(g) => model.transition_logpdf(k, prev, x) - g.logpdf(x),
        }
    }
}

/// `q_k(· | prev)` for `k ≥ 1`. An EKF proposal that cannot be linearized at
/// this particle falls back to the transition density.
pub fn particle_proposal<'a, M: GaussianSsm + ?Sized>(
    kind: ProposalKind,
    model: &'a M,
    k: usize,
    prev: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<ParticleProposal<'a>> {
    let bootstrap = || ParticleProposal::Bootstrap {
        mean: model.drift(k - 1, prev),
        noise: model.process_noise(k - 1),
    };
    match kind {
        ProposalKind::Bootstrap => Ok(bootstrap()),
        ProposalKind::Ekf => {
            let attempt = ekf_predict(&FilterState::point_mass(prev), model, k)
                .and_then(|(pred, _)| ekf_update(&pred, model, k, y))
                .and_then(|(post, _)| Gaussian::new(post.mean, post.cov));
            match attempt {
                Ok(g) => Ok(ParticleProposal::Gaussian(g)),
                Err(e) => {
                    log::debug!("EKF proposal failed at step {k}: {e}; using the transition");
                    Ok(bootstrap())
                }
            }
        }
    }
}

/// `q₀`.
pub fn initial_proposal<M: GaussianSsm + ?Sized>(kind: ProposalKind, model: &M, y0: &DVector<f64>) -> Result<Gaussian> {
    match kind {
        ProposalKind::Bootstrap => Ok(model.initial().clone()),
        ProposalKind::Ekf => {
            let (post, _) = ekf_update(&FilterState::from_gaussian(model.initial()), model, 0, y0)?;
            Gaussian::new(post.mean, post.cov)
        }
    }
}

/// `log g_k(y | x)`; a measurement that cannot be evaluated gets zero weight.
pub(crate) fn log_likelihood<M: GaussianSsm + ?Sized>(model: &M, k: usize, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    match model.obs_logpdf(k, y, x) {
        Ok(v) if !v.is_nan() => v,
        Ok(_) => f64::NEG_INFINITY,
        Err(e) => {
            log::debug!("observation density failed at step {k}: {e}");
            f64::NEG_INFINITY
        }
    }
}

/// Normalizing sum `log Σ exp(log_w)`, failing when every weight vanishes.
pub(crate) fn checked_lse(log_w: &[f64], step: usize) -> Result<f64> {
    match log_sum_exp(log_w) {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::ParticleDegeneracy { step }),
    }
}

/// Particles, weights and ancestors at one time step.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub k: usize,
    pub states: Vec<DVector<f64>>,
    pub log_w: Vec<f64>,
    /// Indices into the previous step's particles; empty at `k = 0`.
    pub ancestors: Vec<usize>,
    pub log_z: f64,
}

impl ParticleSystem {
    /// Weighted mean and covariance of the particles.
    pub fn moments(&self) -> Result<(DVector<f64>, nalgebra::DMatrix<f64>)> {
        let lse = checked_lse(&self.log_w, self.k)?;
        let d = self.states[0].len();
        let mut mean = DVector::zeros(d);
        for (x, lw) in self.states.iter().zip(&self.log_w) {
            mean += x * (lw - lse).exp();
        }
        let mut cov = nalgebra::DMatrix::zeros(d, d);
        for (x, lw) in self.states.iter().zip(&self.log_w) {
            let r = x - &mean;
            cov += &r * r.transpose() * (lw - lse).exp();
        }
        Ok((mean, cov))
    }
}

#[derive(Debug, Clone)]
pub struct PfRun {
    /// `log Z_k` for `k = 0..=t`.
    pub log_z: Vec<f64>,
    pub history: Option<Vec<ParticleSystem>>,
}

impl PfRun {
    pub fn final_log_z(&self) -> f64 {
        *self.log_z.last().expect("at least one step")
    }
}

/// Runs the particle filter over `data` with `n` particles.
pub fn pf_run<M: GaussianSsm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    proposal: ProposalKind,
    resampler: Resampler,
    data: &Dataset,
    n: usize,
    rng: &mut R,
    keep_history: bool,
) -> Result<PfRun> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one particle".into()));
    }
    data.validate(model)?;
    let ln_n = (n as f64).ln();
    let y0 = &data.observations[0];
    let q0 = initial_proposal(proposal, model, y0)?;
    let mut states: Vec<DVector<f64>> = (0..n).map(|_| q0.sample(rng)).collect();
    let mut log_w: Vec<f64> = states
        .iter()
        .map(|x| {
            let ratio = match proposal {
                ProposalKind::Bootstrap => 0.0,
                ProposalKind::Ekf => model.initial().logpdf(x) - q0.logpdf(x),
            };
            log_likelihood(model, 0, y0, x) + ratio
        })
        .collect();
    let mut log_z = checked_lse(&log_w, 0)? - ln_n;
    let mut trace = vec![log_z];
    let mut history = keep_history.then(Vec::new);
    if let Some(h) = history.as_mut() {
        h.push(ParticleSystem {
            k: 0,
            states: states.clone(),
            log_w: log_w.clone(),
            ancestors: Vec::new(),
            log_z,
        });
    }
    for (k, y) in data.observations.iter().enumerate().skip(1) {
        let ancestors = resampler.draw(&log_w, rng)?;
        let mut next = Vec::with_capacity(n);
        let mut next_w = Vec::with_capacity(n);
        for &a in &ancestors {
            let prev = &states[a];
            let q = particle_proposal(proposal, model, k, prev, y)?;
            let x = q.sample(rng);
            next_w.push(log_likelihood(model, k, y, &x) + q.log_ratio(model, k, prev, &x));
            next.push(x);
        }
        states = next;
        log_w = next_w;
        log_z += checked_lse(&log_w, k)? - ln_n;
        trace.push(log_z);
        if let Some(h) = history.as_mut() {
            h.push(ParticleSystem {
                k,
                states: states.clone(),
                log_w: log_w.clone(),
                ancestors,
                log_z,
            });
        }
    }
    Ok(PfRun { log_z: trace, history })
}
