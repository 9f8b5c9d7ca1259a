//! Monte Carlo diagnostics: spread of log-likelihood estimates, chain
//! autocorrelation and effective sample size, and tracking accuracy.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::symmetrize;

/// 0.95 quantile of the chi-square distribution with two degrees of freedom.
pub fn chi2_2dof_95() -> f64 {
    -2.0 * 0.05f64.ln()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(1/τ) Σ (log Z_j − mean)²`.
pub fn var_log_z(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    let m = mean(samples);
    Ok(samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / samples.len() as f64)
}

fn centered(chain: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = mean(chain);
    let c: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let c0: f64 = c.iter().map(|x| x * x).sum();
    // rounding noise of a constant chain counts as zero variance
    if c0 <= chain.len() as f64 * (16.0 * f64::EPSILON * m.abs()).powi(2) {
        return Err(Error::ZeroVariance);
    }
    Ok((c, c0))
}

fn lag_product(c: &[f64], l: usize) -> f64 {
    c[..c.len() - l].iter().zip(&c[l..]).map(|(a, b)| a * b).sum()
}

/// Normalized autocorrelation for lags `0..=max_lag`.
pub fn autocorr(chain: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let tau = chain.len();
    if tau <= max_lag || tau < 2 {
        return Err(Error::TooFewSamples { needed: (max_lag + 1).max(2), got: tau });
    }
    let (c, c0) = centered(chain)?;
    Ok((0..=max_lag).map(|l| lag_product(&c, l) / c0).collect())
}

/// `τ / (1 + 2 Σ_{l≥1} ac(l))`, with the sum stopped before the first lag
/// whose autocorrelation is not positive; capped at `τ`.
pub fn ess(chain: &[f64]) -> Result<f64> {
    let tau = chain.len();
    if tau < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: tau });
    }
    let (c, c0) = centered(chain)?;
    let mut sum = 0.0;
    for l in 1..tau {
        let a = lag_product(&c, l) / c0;
        if a <= 0.0 {
            break;
        }
        sum += a;
    }
    Ok((tau as f64 / (1.0 + 2.0 * sum)).min(tau as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackMetrics {
    /// Root mean squared position error.
    pub rmse: f64,
    /// Fraction of steps whose true position lies inside the 95% ellipse.
    pub consistency: f64,
}

/// Position accuracy of filter means and covariances against the true
/// states; positions are the first two state components.
pub fn track_metrics(means: &[DVector<f64>], covs: &[DMatrix<f64>], truth: &[DVector<f64>]) -> Result<TrackMetrics> {
    if means.len() != truth.len() || covs.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} means, {} covariances, {} true states",
            means.len(),
            covs.len(),
            truth.len()
        )));
    }
    let threshold = chi2_2dof_95();
    let mut sq = 0.0;
    let mut inside = 0usize;
    for ((m, p), x) in means.iter().zip(covs).zip(truth) {
        if m.len() < 2 || x.len() < 2 || p.nrows() < 2 {
            return Err(Error::ShapeMismatch("need at least two position components".into()));
        }
        let e = DVector::from_vec(vec![m[0] - x[0], m[1] - x[1]]);
        sq += e.norm_squared();
        let block = symmetrize(&p.view((0, 0), (2, 2)).into_owned());
        let chol = nalgebra::Cholesky::new(block).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
        if e.dot(&chol.solve(&e)) <= threshold {
            inside += 1;
        }
    }
    let t = truth.len() as f64;
    Ok(TrackMetrics {
        rmse: (sq / t).sqrt(),
        consistency: inside as f64 / t,
    })
}

/// Writes `metric,value` rows.
pub fn write_metrics_csv<W: Write>(rows: &[(String, f64)], writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Dataset(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "value"]).map_err(io)?;
    for (name, v) in rows {
        w.write_record([name.as_str(), &format!("{v:?}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Dataset(e.to_string()))
}

/// Writes `lag,ac` rows.
pub fn write_autocorr_csv<W: Write>(ac: &[f64], writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Dataset(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lag", "ac"]).map_err(io)?;
    for (l, v) in ac.iter().enumerate() {
        w.write_record([l.to_string(), format!("{v:?}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Dataset(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn var_examples() {
        assert_eq!(var_log_z(&[3.0; 5]).unwrap(), 0.0);
        assert_eq!(var_log_z(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(var_log_z(&[1.0]), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn var_matches_compensated_two_pass() {
        let xs: Vec<f64> = white(1_000_000, 1).iter().map(|x| 1e3 + 5.0 * x).collect();
        // Neumaier-compensated sums as the high-precision reference
        let ksum = |it: &mut dyn Iterator<Item = f64>| {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for x in it {
                let t = s + x;
                c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
                s = t;
            }
            s + c
        };
        let m = ksum(&mut xs.iter().copied()) / xs.len() as f64;
        let v = ksum(&mut xs.iter().map(|x| (x - m).powi(2))) / xs.len() as f64;
        assert!((var_log_z(&xs).unwrap() - v).abs() / v < 1e-9);
    }

    #[test]
    fn white_noise_autocorrelation_and_ess() {
        let xs = white(100_000, 2);
        let ac = autocorr(&xs, 10).unwrap();
        assert_eq!(ac[0], 1.0);
        let bound = 4.0 / (xs.len() as f64).sqrt();
        assert!(ac[1..].iter().all(|a| a.abs() < bound));
        let e = ess(&xs).unwrap();
        assert!((e / xs.len() as f64 - 1.0).abs() < 0.1);
    }

    #[test]
    fn degenerate_chains() {
        assert!(matches!(autocorr(&[2.0; 50], 5), Err(Error::ZeroVariance)));
        assert!(matches!(ess(&[0.1; 37]), Err(Error::ZeroVariance)));
        assert!(matches!(autocorr(&[1.0, 2.0, 3.0], 3), Err(Error::TooFewSamples { .. })));
        let alt: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(ess(&alt).unwrap(), 1000.0);
    }

    #[test]
    fn chi2_quantile() {
        assert!((chi2_2dof_95() - 5.991465).abs() < 1e-5);
    }

    #[test]
    fn tracking_examples() {
        let truth: Vec<DVector<f64>> = (0..10).map(|k| DVector::from_vec(vec![k as f64, 1.0, 0.0, 0.0])).collect();
        let covs = vec![DMatrix::identity(4, 4); 10];
        let m = track_metrics(&truth, &covs, &truth).unwrap();
        assert_eq!((m.rmse, m.consistency), (0.0, 1.0));
        // offset of 3 in x: squared Mahalanobis 9 > 5.99
        let shifted: Vec<DVector<f64>> = truth.iter().map(|x| x + DVector::from_vec(vec![3.0, 0.0, 0.0, 0.0])).collect();
        let m = track_metrics(&shifted, &covs, &truth).unwrap();
        assert!((m.rmse - 3.0).abs() < 1e-12);
        assert_eq!(m.consistency, 0.0);
        let bad = vec![DMatrix::zeros(4, 4); 10];
        assert!(track_metrics(&truth, &bad, &truth).is_err());
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_metrics_csv(&[("ess_q2".into(), 12.5)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value\ness_q2,12.5\n");
        let mut buf = Vec::new();
        write_autocorr_csv(&[1.0, 0.5], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "lag,ac\n0,1.0\n1,0.5\n");
    }

    proptest! {
        #[test]
        fn var_is_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 2..40), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = var_log_z(&xs).unwrap();
            let b = var_log_z(&shifted).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn autocorr_and_ess_affine_invariant(seed in 0u64..1000, s in 0.1f64..10.0, c in -100.0f64..100.0) {
            let xs = white(300, seed);
            let ys: Vec<f64> = xs.iter().map(|x| s * x + c).collect();
            let a = autocorr(&xs, 20).unwrap();
            let b = autocorr(&ys, 20).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            prop_assert!((ess(&xs).unwrap() - ess(&ys).unwrap()).abs() < 1e-6);
        }
    }
}
