//! Multinomial and systematic resampling as deterministic maps from uniform
//! randomness and weights to ancestor indices.

use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::log_sum_exp;

/// Normalized cumulative weights `d¹..dⁿ` from log-weights; the last entry is
/// exactly one.
pub fn cumulative(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.is_empty() {
        return Err(Error::DegenerateWeights);
    }
    let lse = log_sum_exp(log_w).map_err(|_| Error::DegenerateWeights)?;
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut acc = 0.0;
    let mut d: Vec<f64> = log_w
        .iter()
        .map(|lw| {
            acc += (lw - lse).exp();
            acc.min(1.0)
        })
        .collect();
    *d.last_mut().expect("nonempty") = 1.0;
    Ok(d)
}

/// Index `j` with `v ∈ (d^{j-1}, d^j]`; `v ≤ 0` maps to the first index with
/// positive mass.
fn locate(d: &[f64], v: f64) -> usize {
    let j = if v <= 0.0 {
        d.partition_point(|x| *x <= 0.0)
    } else {
        d.partition_point(|x| *x < v)
    };
    j.min(d.len() - 1)
}

/// `rⁱ(u, w) = j ⟺ uⁱ ∈ (d^{j-1}, d^j]`.
pub fn multinomial_map(u: &[f64], d: &[f64]) -> Result<Vec<usize>> {
    if u.len() != d.len() {
        return Err(Error::ShapeMismatch(format!("{} uniforms for {} weights", u.len(), d.len())));
    }
    Ok(u.iter().map(|&ui| locate(d, ui)).collect())
}

/// `rⁱ(u, w) = j ⟺ u + i ∈ (n·d^{j-1}, n·d^j]` for `i = 0..n`.
pub fn systematic_map(u: f64, d: &[f64]) -> Vec<usize> {
    let scaled = scaled_cumulative(d);
    (0..d.len()).map(|i| locate(&scaled, u + i as f64)).collect()
}

/// `n·d^j`, with the last entry exactly `n`.
pub fn scaled_cumulative(d: &[f64]) -> Vec<f64> {
    let n = d.len() as f64;
    let mut e: Vec<f64> = d.iter().map(|x| n * x).collect();
    if let Some(last) = e.last_mut() {
        *last = n;
    }
    e
}

/// Draws an index with probability proportional to `exp(log_p)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_p: &[f64], rng: &mut R) -> Result<usize> {
    let d = cumulative(log_p)?;
    Ok(locate(&d, open_unit(rng)))
}

/// Uniform on `(0, 1]`.
pub(crate) fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    Multinomial,
    Systematic,
}

impl Resampler {
    pub fn name(self) -> &'static str {
        match self {
            Resampler::Multinomial => "multinomial",
            Resampler::Systematic => "systematic",
        }
    }

    /// Draws ancestor indices from log-weights, with uniforms on `(0, 1]`.
    pub fn draw<R: Rng + ?Sized>(self, log_w: &[f64], rng: &mut R) -> Result<Vec<usize>> {
        let d = cumulative(log_w)?;
        match self {
            Resampler::Multinomial => {
                let u: Vec<f64> = (0..d.len()).map(|_| open_unit(rng)).collect();
                multinomial_map(&u, &d)
            }
            Resampler::Systematic => Ok(systematic_map(open_unit(rng), &d)),
        }
    }
}

impl FromStr for Resampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(Resampler::Multinomial),
            "systematic" => Ok(Resampler::Systematic),
            other => Err(Error::InvalidParameter(format!("unknown resampling scheme `{other}`"))),
        }
    }
}
