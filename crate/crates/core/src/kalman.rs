//! Kalman filtering for linear models and extended Kalman steps for
//! nonlinear ones, plus an extended RTS smoother used for mode finding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{chol_psd, symmetrize, Gaussian};
use crate::ssm::{Dataset, GaussianSsm};

/// Mean and covariance of a Gaussian filter, with accumulated log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
}

impl FilterState {
    pub fn from_gaussian(g: &Gaussian) -> Self {
        Self {
            mean: g.mean().clone(),
            cov: g.cov().clone(),
            loglik: 0.0,
        }
    }

    pub fn point_mass(x: &DVector<f64>) -> Self {
        let d = x.len();
        Self {
            mean: x.clone(),
            cov: DMatrix::zeros(d, d),
            loglik: 0.0,
        }
    }
}

/// One EKF measurement linearization.
#[derive(Debug, Clone)]
pub struct LinearizedStep {
    /// Observation Jacobian at the linearization point.
    pub h: DMatrix<f64>,
    /// `h(x̂) − H·x̂`.
    pub h_hat: DVector<f64>,
    /// Innovation covariance `H·P·Hᵀ + R`.
    pub s: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// Wrapped innovation `y − h(x̂)`.
    pub innovation: DVector<f64>,
}

/// Drift linearization `c(x) ≈ C·x + ĉ`.
#[derive(Debug, Clone)]
pub struct LinearizedDrift {
    pub c: DMatrix<f64>,
    pub c_hat: DVector<f64>,
}

/// Propagates a state at time `k − 1` to time `k`.
pub fn ekf_predict<M: GaussianSsm + ?Sized>(
    state: &FilterState,
    model: &M,
    k: usize,
) -> Result<(FilterState, LinearizedDrift)> {
    assert!(k >= 1, "prediction targets k >= 1");
    let x = &state.mean;
    let fx = model.drift(k - 1, x);
    let c = model.drift_jacobian(k - 1, x);
    let c_hat = &fx - &c * x;
    let q = model.process_noise(k - 1);
    let cov = symmetrize(&(&c * &state.cov * c.transpose() + q.cov()));
    Ok((
        FilterState {
            mean: fx,
            cov,
            loglik: state.loglik,
        },
        LinearizedDrift { c, c_hat },
    ))
}

/// Conditions a predicted state at time `k` on `y`.
pub fn ekf_update<M: GaussianSsm + ?Sized>(
    state: &FilterState,
    model: &M,
    k: usize,
    y: &DVector<f64>,
) -> Result<(FilterState, LinearizedStep)> {
    if y.len() != model.obs_dim(k) {
        return Err(Error::ShapeMismatch(format!(
            "observation {k} has dimension {}, model expects {}",
            y.len(),
            model.obs_dim(k)
        )));
    }
    let x = &state.mean;
    let hx = model.observe(k, x)?;
    let h = model.observe_jacobian(k, x)?;
    let h_hat = &hx - &h * x;
    let mut innovation = y - &hx;
    model.wrap_residual(k, &mut innovation);
    let ph = &state.cov * h.transpose();
    let s = symmetrize(&(&h * &ph + model.obs_noise(k).cov()));
    let sf = chol_psd(&s)?;
    let gain = sf.solve_matrix(&ph.transpose()).transpose();
    let mean = x + &gain * &innovation;
    let cov = symmetrize(&(&state.cov - &gain * &s * gain.transpose()));
    let loglik = state.loglik + crate::gauss::log_normal_residual(&innovation, &sf);
    Ok((
        FilterState { mean, cov, loglik },
        LinearizedStep {
            h,
            h_hat,
            s,
            gain,
            innovation,
        },
    ))
}

/// Observation Jacobian and offset at the state mean.
pub fn relinearize<M: GaussianSsm + ?Sized>(
    state: &FilterState,
    model: &M,
    k: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let x = &state.mean;
    let h = model.observe_jacobian(k, x)?;
    let h_hat = model.observe(k, x)? - &h * x;
    Ok((h, h_hat))
}

/// Filtered states for `k = 0..=t`; the log-likelihood is exact only for
/// linear models.
pub fn ekf_run<M: GaussianSsm + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<FilterState>> {
    data.validate(model)?;
    let mut out = Vec::with_capacity(data.len());
    let mut state = FilterState::from_gaussian(model.initial());
    for (k, y) in data.observations.iter().enumerate() {
        if k > 0 {
            state = ekf_predict(&state, model, k)?.0;
        }
        state = ekf_update(&state, model, k, y)?.0;
        out.push(state.clone());
    }
    Ok(out)
}

/// EKF approximation of `log p(y₀:t)`.
pub fn ekf_loglik<M: GaussianSsm + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    Ok(ekf_run(model, data)?.last().map(|s| s.loglik).unwrap_or(0.0))
}

fn probe_points(d: usize) -> Vec<DVector<f64>> {
    vec![
        DVector::from_fn(d, |i, _| 0.5 - 0.3 * i as f64),
        DVector::from_fn(d, |i, _| 1.0 + i as f64),
        DVector::from_fn(d, |i, _| if i % 2 == 0 { -3.7 } else { 2.3 }),
    ]
}

fn check_affine(
    name: &str,
    k: usize,
    f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    jac: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
    d: usize,
) -> Result<()> {
    let pts = probe_points(d);
    let j0 = jac(&pts[0])?;
    let off0 = f(&pts[0])? - &j0 * &pts[0];
    for p in &pts[1..] {
        let j = jac(p)?;
        let off = f(p)? - &j * p;
        let scale = 1.0 + j0.amax() + off0.amax();
        if (&j - &j0).amax() > 1e-12 * scale || (&off - &off0).amax() > 1e-9 * scale {
            return Err(Error::NonLinearModel(format!("{name} at step {k} is not affine")));
        }
    }
    Ok(())
}

/// Exact `log p(y₀:t)` for a linear Gaussian model.
pub fn kf_loglik<M: GaussianSsm + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    data.validate(model)?;
    let d = model.state_dim();
    for k in 0..data.len() {
        check_affine("observation", k, |x| model.observe(k, x), |x| model.observe_jacobian(k, x), d)?;
        if k + 1 < data.len() {
            check_affine("drift", k, |x| Ok(model.drift(k, x)), |x| Ok(model.drift_jacobian(k, x)), d)?;
        }
    }
    ekf_loglik(model, data)
}

/// Smoothed mean of `x_k` given `prior_k` and `y_{k:k+l}` from one forward EKF
/// pass followed by an extended RTS backward pass.
pub fn erts_mode_estimate<M: GaussianSsm + ?Sized>(
    model: &M,
    prior_k: &Gaussian,
    k: usize,
    ys: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if ys.is_empty() {
        return Err(Error::Dataset("mode estimate needs at least one observation".into()));
    }
    let mut filtered = Vec::with_capacity(ys.len());
    let mut predicted: Vec<(FilterState, DMatrix<f64>)> = Vec::with_capacity(ys.len());
    let mut state = ekf_update(&FilterState::from_gaussian(prior_k), model, k, &ys[0])?.0;
    filtered.push(state.clone());
    for (s, y) in ys.iter().enumerate().skip(1) {
        let (pred, drift) = ekf_predict(&state, model, k + s)?;
        state = ekf_update(&pred, model, k + s, y)?.0;
        predicted.push((pred, drift.c));
        filtered.push(state.clone());
    }
    let mut smoothed = filtered.last().expect("nonempty").mean.clone();
    for s in (0..filtered.len() - 1).rev() {
        let (pred, c) = &predicted[s];
        let pf = chol_psd(&pred.cov)?;
        let gain = pf.solve_matrix(&(c * &filtered[s].cov)).transpose();
        smoothed = &filtered[s].mean + gain * (&smoothed - &pred.mean);
    }
    Ok(smoothed)
}
