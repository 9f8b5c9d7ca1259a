//! Browser bindings for the interactive demo page. Each exported function
//! takes plain numbers and returns a JSON string for the page to plot.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use twisted_smc::diag::track_metrics;
use twisted_smc::filters::{derive_seed, estimate_log_z, FilterKind, FilterSpec};
use twisted_smc::kalman::ekf_run;
use twisted_smc::resample::Resampler;
use twisted_smc::ssm::{linear_gaussian_model, range_bearing_model, simulate, Dataset};
use twisted_smc::twist::{twist_local, twist_local_k0};
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &Result<T, String>) -> String {
    #[derive(Serialize)]
    struct Failure<'a> {
        error: &'a str,
    }
    match value {
        Ok(v) => serde_json::to_string(v),
        Err(e) => serde_json::to_string(&Failure { error: e }),
    }
    .expect("demo output serializes")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[derive(Serialize)]
pub struct TrackOutput {
    pub truth: Vec<[f64; 2]>,
    /// Measurements mapped back to Cartesian coordinates.
    pub measured: Vec<[f64; 2]>,
    pub estimate: Vec<[f64; 2]>,
    pub rmse: f64,
    pub consistency: f64,
}

fn simulate_rb(seed: u64, t: usize, q2: f64, sigma1sq: f64, sigma2sq: f64) -> Result<Dataset, String> {
    let model = range_bearing_model(q2, sigma1sq, sigma2sq, 1.0).map_err(err)?;
    simulate(&model, t, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
}

/// Simulates a range-bearing track and follows it with an EKF.
pub fn track(seed: u64, t: usize, q2: f64, sigma1sq: f64, sigma2sq: f64) -> Result<TrackOutput, String> {
    let model = range_bearing_model(q2, sigma1sq, sigma2sq, 1.0).map_err(err)?;
    let data = simulate_rb(seed, t, q2, sigma1sq, sigma2sq)?;
    let truth = data.truth.clone().ok_or("simulation lost its states")?;
    let states = ekf_run(&model, &data).map_err(err)?;
    let means: Vec<_> = states.iter().map(|s| s.mean.clone()).collect();
    let covs: Vec<_> = states.iter().map(|s| s.cov.clone()).collect();
    let m = track_metrics(&means, &covs, &truth).map_err(err)?;
    Ok(TrackOutput {
        truth: truth.iter().map(|x| [x[0], x[1]]).collect(),
        measured: data
            .observations
            .iter()
            .map(|y| [y[0] * y[1].cos(), y[0] * y[1].sin()])
            .collect(),
        estimate: means.iter().map(|x| [x[0], x[1]]).collect(),
        rmse: m.rmse,
        consistency: m.consistency,
    })
}

#[wasm_bindgen]
pub fn track_json(seed: u32, t: u32, q2: f64, sigma1sq: f64, sigma2sq: f64) -> String {
    to_json(&track(seed as u64, t as usize, q2, sigma1sq, sigma2sq))
}

#[derive(Serialize)]
pub struct SpreadRow {
    pub filter: &'static str,
    pub n: usize,
    pub log_z: Vec<f64>,
    pub variance: f64,
}

/// Replicate log-likelihood estimates of the standard and twisted filters on
/// one simulated range-bearing dataset.
pub fn log_z_spread(seed: u64, t: usize, reps: usize, ns: &[usize], lookahead: usize) -> Result<Vec<SpreadRow>, String> {
    let model = range_bearing_model(0.1, 25.0, 1e-3, 1.0).map_err(err)?;
    let data = simulate_rb(seed, t, 0.1, 25.0, 1e-3)?;
    let mut rows = Vec::new();
    for (c, &n) in ns.iter().enumerate() {
        for (f, kind) in [FilterKind::Bspf, FilterKind::TwistedBspfMode].into_iter().enumerate() {
            let spec = FilterSpec::new(kind, Resampler::Systematic, n, lookahead);
            let stream = derive_seed(seed, (2 * c + f) as u64 + 1);
            let log_z = (0..reps as u64)
                .map(|r| estimate_log_z(&spec, &model, &data, &mut ChaCha8Rng::seed_from_u64(derive_seed(stream, r))))
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            let mean = log_z.iter().sum::<f64>() / reps as f64;
            let variance = log_z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
            rows.push(SpreadRow {
                filter: kind.id(),
                n,
                log_z,
                variance,
            });
        }
    }
    Ok(rows)
}

#[wasm_bindgen]
pub fn log_z_spread_json(seed: u32, t: u32, reps: u32, n_max: u32, lookahead: u32) -> String {
    let ns: Vec<usize> = std::iter::successors(Some(8usize), |n| Some(n * 2))
        .take_while(|&n| n <= n_max.max(8) as usize)
        .collect();
    to_json(&log_z_spread(seed as u64, t as usize, reps.max(2) as usize, &ns, lookahead as usize))
}

#[derive(Serialize)]
pub struct ProfileOutput {
    pub x: Vec<f64>,
    /// One curve per lookahead, scaled to a maximum of 1.
    pub curves: Vec<ProfileCurve>,
    pub observations: Vec<f64>,
    pub k: usize,
}

#[derive(Serialize)]
pub struct ProfileCurve {
    pub lookahead: usize,
    pub phi: Vec<f64>,
}

/// Twisting function of a scalar linear model at step `k` for lookahead
/// `0..=max_lookahead`, on a grid around the simulated state.
pub fn twist_profile(seed: u64, k: usize, max_lookahead: usize, a: f64, q: f64, r: f64) -> Result<ProfileOutput, String> {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let model = linear_gaussian_model(m(a), m(q), m(1.0), m(r), DVector::zeros(1), m(1.0)).map_err(err)?;
    let t = k + max_lookahead;
    let data = simulate(&model, t, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
    let truth = data.truth.as_ref().ok_or("simulation lost its states")?;
    let prev = if k == 0 { None } else { Some(truth[k - 1].clone()) };
    let centre = truth[k][0];
    let half = 4.0 * (q + r).sqrt().max(0.5);
    let x: Vec<f64> = (0..=200).map(|i| centre - half + 2.0 * half * i as f64 / 200.0).collect();
    let mut curves = Vec::new();
    for l in 0..=max_lookahead {
        let ys = &data.observations[k..=k + l];
        let params = match &prev {
            None => twist_local_k0(&model, ys, true),
            Some(p) => twist_local(&model, k, p, ys, true),
        }
        .map_err(err)?;
        let log_phi: Vec<f64> = x.iter().map(|&v| params.log_phi(&DVector::from_element(1, v))).collect();
        let top = log_phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        curves.push(ProfileCurve {
            lookahead: l,
            phi: log_phi.iter().map(|v| (v - top).exp()).collect(),
        });
    }
    Ok(ProfileOutput {
        x,
        curves,
        observations: data.observations.iter().map(|y| y[0]).collect(),
        k,
    })
}

#[wasm_bindgen]
pub fn twist_profile_json(seed: u32, k: u32, max_lookahead: u32, a: f64, q: f64, r: f64) -> String {
    to_json(&twist_profile(seed as u64, k as usize, max_lookahead as usize, a, q, r))
}
