//! Named likelihood estimators: standard and twisted particle filters with a
//! bootstrap or EKF proposal.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::Resampler;
use crate::smc::{pf_run, ProposalKind};
use crate::ssm::{Dataset, GaussianSsm};
use crate::twistpf::{tpf_run, ExponentialTwisting, TwistScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    /// Bootstrap particle filter.
    Bspf,
    /// Particle filter with a per-particle EKF proposal.
    Ekfpf,
    TwistedBspfLocal,
    TwistedEkfpfLocal,
    TwistedBspfMode,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Bspf,
        FilterKind::Ekfpf,
        FilterKind::TwistedBspfLocal,
        FilterKind::TwistedEkfpfLocal,
        FilterKind::TwistedBspfMode,
    ];

    pub fn id(self) -> &'static str {
        match self {
            FilterKind::Bspf => "bspf",
            FilterKind::Ekfpf => "ekfpf",
            FilterKind::TwistedBspfLocal => "twisted-bspf-local",
            FilterKind::TwistedEkfpfLocal => "twisted-ekfpf-local",
            FilterKind::TwistedBspfMode => "twisted-bspf-mode",
        }
    }

    pub fn proposal(self) -> ProposalKind {
        match self {
            FilterKind::Ekfpf | FilterKind::TwistedEkfpfLocal => ProposalKind::Ekf,
            _ => ProposalKind::Bootstrap,
        }
    }

    /// Twisting scheme, or `None` for the untwisted filters.
    pub fn twist_scheme(self) -> Option<TwistScheme> {
        match self {
            FilterKind::Bspf | FilterKind::Ekfpf => None,
            FilterKind::TwistedBspfLocal | FilterKind::TwistedEkfpfLocal => Some(TwistScheme::Local),
            FilterKind::TwistedBspfMode => Some(TwistScheme::Mode),
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown filter `{s}`")))
    }
}

/// A fully specified likelihood estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub resampling: Resampler,
    pub n: usize,
    /// Lookahead; ignored by the untwisted filters.
    pub lookahead: usize,
    /// Relinearize the measurement model at each EKF update when building
    /// twisting functions.
    pub relinearize: bool,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, resampling: Resampler, n: usize, lookahead: usize) -> Self {
        Self {
            kind,
            resampling,
            n,
            lookahead,
            relinearize: true,
        }
    }

    pub fn twisting(&self) -> Option<ExponentialTwisting> {
        self.kind.twist_scheme().map(|scheme| ExponentialTwisting {
            scheme,
            lookahead: self.lookahead,
            relinearize: self.relinearize,
        })
    }
}

/// One draw of the log marginal likelihood estimate.
pub fn estimate_log_z<M, R>(spec: &FilterSpec, model: &M, data: &Dataset, rng: &mut R) -> Result<f64>
where
    M: GaussianSsm + ?Sized,
    R: RngCore,
{
    let proposal = spec.kind.proposal();
    match spec.twisting() {
        None => Ok(pf_run(model, proposal, spec.resampling, data, spec.n, rng, false)?.final_log_z()),
        Some(tw) => Ok(tpf_run(model, &tw, proposal, spec.resampling, data, spec.n, rng, false)?.final_log_z()),
    }
}

/// Splitmix64 hash of `(base, stream)`, used to give replicates and grid
/// cells independent, schedule-free seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
