//! Exponential twisting functions `φ(x) = exp(log α + βᵀx − ½xᵀΓx)` for
//! Gaussian models, built from EKF linearizations of `p(y_{k:k+l} | x_k)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{chol_psd, symmetrize, Factor, Gaussian, LN_2PI};
use crate::kalman::{ekf_predict, ekf_update, erts_mode_estimate, relinearize, FilterState, LinearizedDrift};
use crate::smc::ParticleProposal;
use crate::ssm::GaussianSsm;

/// Jitter added to the empirical covariance of the mode-finding prior.
pub const MODE_FIT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TwistParams {
    pub log_alpha: f64,
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
    /// Number of future observations folded in.
    pub l: usize,
}

impl TwistParams {
    /// `φ ≡ 1`.
    pub fn unit(d: usize) -> Self {
        Self {
            log_alpha: 0.0,
            beta: DVector::zeros(d),
            gamma: DMatrix::zeros(d, d),
            l: 0,
        }
    }

    pub fn log_phi(&self, x: &DVector<f64>) -> f64 {
        self.log_alpha + self.beta.dot(x) - 0.5 * (&self.gamma * x).dot(x)
    }
}

/// Linearized measurement `y ≈ H·x + ĥ + v`, `v ~ 𝒩(0, R)`.
#[derive(Debug, Clone)]
pub struct ObsLinearization {
    pub h: DMatrix<f64>,
    pub h_hat: DVector<f64>,
    pub y: DVector<f64>,
    pub r: DMatrix<f64>,
}

/// `φ_{k,0}(x) = 𝒩(y; H·x + ĥ, R)` in exponential form.
pub fn twist_init(lin: &ObsLinearization) -> Result<TwistParams> {
    let rf = chol_psd(&lin.r)?;
    let resid = &lin.y - &lin.h_hat;
    let rinv_resid = rf.solve(&resid);
    let rinv_h = rf.solve_matrix(&lin.h);
    Ok(TwistParams {
        log_alpha: -0.5 * resid.dot(&rinv_resid) - 0.5 * (resid.len() as f64 * LN_2PI + rf.log_det()),
        beta: lin.h.transpose() * rinv_resid,
        gamma: symmetrize(&(lin.h.transpose() * rinv_h)),
        l: 0,
    })
}

#[derive(Debug, Clone)]
struct Absorbed {
    h: DMatrix<f64>,
    s: DMatrix<f64>,
    gain: DMatrix<f64>,
    eps: DVector<f64>,
}

/// Running state of the parameter recursion over `s = 0..=l`.
///
/// `D`, `K` and `v` describe `x_{k+s} | x_k, y_{k+1:k+s-1}` as
/// `𝒩(D·x_k + v, K)` under the linearized model.
#[derive(Debug, Clone)]
pub struct TwistRecursion {
    params: TwistParams,
    d: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DVector<f64>,
    last: Option<Absorbed>,
}

impl TwistRecursion {
    /// Starts at `s = 0`.
    pub fn new(lin: &ObsLinearization) -> Result<Self> {
        let params = twist_init(lin)?;
        let dx = params.beta.len();
        Ok(Self {
            params,
            d: DMatrix::zeros(dx, dx),
            k: DMatrix::zeros(dx, dx),
            v: DVector::zeros(dx),
            last: None,
        })
    }

    /// Folds in one more observation. `drift` and `q` linearize the transition
    /// into time `k + s`; `lin` the measurement at `k + s`.
    pub fn step(&mut self, drift: &LinearizedDrift, q: &DMatrix<f64>, lin: &ObsLinearization) -> Result<()> {
        let c = &drift.c;
        match self.last.take() {
            None => {
                self.d = c.clone();
                self.k = q.clone();
                self.v = drift.c_hat.clone();
            }
            Some(prev) => {
                let cg = c * &prev.gain;
                self.d = (c - &cg * &prev.h) * &self.d;
                let inner = &self.k - &prev.gain * &prev.s * prev.gain.transpose();
                self.k = symmetrize(&(c * inner * c.transpose() + q));
                self.v = c * (&self.v + &prev.gain * &prev.eps) + &drift.c_hat;
            }
        }
        let h = &lin.h;
        let eps = &lin.y - &lin.h_hat - h * &self.v;
        let s = symmetrize(&(h * &self.k * h.transpose() + &lin.r));
        let sf = chol_psd(&s)?;
        let sinv_eps = sf.solve(&eps);
        let hd = h * &self.d;
        let gain = sf.solve_matrix(&(h * &self.k)).transpose();
        self.params.log_alpha += -0.5 * eps.dot(&sinv_eps) - 0.5 * (eps.len() as f64 * LN_2PI + sf.log_det());
        self.params.beta += hd.transpose() * &sinv_eps;
        self.params.gamma = symmetrize(&(&self.params.gamma + hd.transpose() * sf.solve_matrix(&hd)));
        self.params.l += 1;
        self.last = Some(Absorbed { h: h.clone(), s, gain, eps });
        Ok(())
    }

    pub fn params(&self) -> &TwistParams {
        &self.params
    }

    pub fn into_params(self) -> TwistParams {
        self.params
    }
}

/// Measurement linearization at the EKF step for time `k`, returning the
/// updated state. Angular residuals are wrapped around the linearization point.
fn linearize_measurement<M: GaussianSsm + ?Sized>(
    model: &M,
    k: usize,
    predicted: &FilterState,
    y: &DVector<f64>,
    relinearize_at_update: bool,
) -> Result<(FilterState, ObsLinearization)> {
    let (post, step) = ekf_update(predicted, model, k, y)?;
    let (h, h_hat, x_lin) = if relinearize_at_update {
        let (h, h_hat) = relinearize(&post, model, k)?;
        (h, h_hat, &post.mean)
    } else {
        (step.h, step.h_hat, &predicted.mean)
    };
    let hx = model.observe(k, x_lin)?;
    let mut resid = y - &hx;
    model.wrap_residual(k, &mut resid);
    let lin = ObsLinearization {
        h,
        h_hat,
        y: hx + resid,
        r: model.obs_noise(k).cov().clone(),
    };
    Ok((post, lin))
}

/// Parameters of `φ_{k,l}` with `l = ys.len() − 1` from an EKF pass whose
/// state at time `k` before conditioning on `y_k` is `start`.
pub fn ekf_twist<M: GaussianSsm + ?Sized>(
    model: &M,
    k: usize,
    start: &FilterState,
    ys: &[DVector<f64>],
    relinearize_at_update: bool,
) -> Result<TwistParams> {
    let (y0, rest) = ys.split_first().ok_or_else(|| Error::Dataset("no observations to twist on".into()))?;
    let (mut state, lin) = linearize_measurement(model, k, start, y0, relinearize_at_update)?;
    let mut rec = TwistRecursion::new(&lin)?;
    for (s, y) in rest.iter().enumerate() {
        let t = k + s + 1;
        let (pred, drift) = ekf_predict(&state, model, t)?;
        let (post, lin) = linearize_measurement(model, t, &pred, y, relinearize_at_update)?;
        rec.step(&drift, model.process_noise(t - 1).cov(), &lin)?;
        state = post;
    }
    Ok(rec.into_params())
}

/// `φ_{0,l}` from an EKF started at `(ν₀, P₀)`.
pub fn twist_local_k0<M: GaussianSsm + ?Sized>(model: &M, ys: &[DVector<f64>], relinearize_at_update: bool) -> Result<TwistParams> {
    ekf_twist(model, 0, &FilterState::from_gaussian(model.initial()), ys, relinearize_at_update)
}

/// `φ_{k,l}` from an EKF started at a point mass on `prev` at time `k − 1`.
pub fn twist_local<M: GaussianSsm + ?Sized>(
    model: &M,
    k: usize,
    prev: &DVector<f64>,
    ys: &[DVector<f64>],
    relinearize_at_update: bool,
) -> Result<TwistParams> {
    let (pred, _) = ekf_predict(&FilterState::point_mass(prev), model, k)?;
    ekf_twist(model, k, &pred, ys, relinearize_at_update)
}

/// Per-particle local parameters. A particle whose linearization fails falls
/// back to its `l = 0` parameters, and to `φ ≡ 1` if those fail too.
pub fn twist_local_all<M: GaussianSsm + ?Sized>(
    model: &M,
    k: usize,
    particles: &[DVector<f64>],
    ys: &[DVector<f64>],
    relinearize_at_update: bool,
) -> Vec<TwistParams> {
    particles
        .iter()
        .map(|xi| {
            twist_local(model, k, xi, ys, relinearize_at_update).unwrap_or_else(|e| {
                log::debug!("local twisting failed at step {k}: {e}; falling back to l = 0");
                twist_local(model, k, xi, &ys[..1], relinearize_at_update).unwrap_or_else(|e| {
                    log::debug!("l = 0 twisting failed at step {k}: {e}; using a flat twist");
                    TwistParams::unit(model.state_dim())
                })
            })
        })
        .collect()
}

/// Shared parameters linearized around the smoothed mode of `x_k`, started
/// from a Gaussian fit to the predicted means `c_{k−1}(ξ_{k−1}ⁱ)`.
pub fn twist_mode<M: GaussianSsm + ?Sized>(
    model: &M,
    k: usize,
    particles: &[DVector<f64>],
    ys: &[DVector<f64>],
    relinearize_at_update: bool,
) -> Result<TwistParams> {
    let mode = mode_estimate(model, k, particles, ys)?;
    ekf_twist(model, k, &FilterState::point_mass(&mode), ys, relinearize_at_update)
}

/// Smoothed mean of `x_k` used as the mode of `p(y_{k:k+l} | x_k)`.
pub fn mode_estimate<M: GaussianSsm + ?Sized>(
    model: &M,
    k: usize,
    particles: &[DVector<f64>],
    ys: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let prior = fit_predicted(model, k, particles)?;
    erts_mode_estimate(model, &prior, k, ys)
}

fn fit_predicted<M: GaussianSsm + ?Sized>(model: &M, k: usize, particles: &[DVector<f64>]) -> Result<Gaussian> {
    let n = particles.len();
    if n == 0 {
        return Err(Error::InvalidParameter("no particles to fit".into()));
    }
    let d = model.state_dim();
    let means: Vec<DVector<f64>> = particles.iter().map(|x| model.drift(k - 1, x)).collect();
    let mean = means.iter().fold(DVector::zeros(d), |acc, m| acc + m) / n as f64;
    let mut cov = DMatrix::identity(d, d) * MODE_FIT_JITTER;
    if n > 1 {
        let scatter = means.iter().fold(DMatrix::zeros(d, d), |acc, m| {
            let r = m - &mean;
            acc + &r * r.transpose()
        });
        cov += scatter / (n - 1) as f64;
    }
    Gaussian::new(mean, cov)
}

/// Closed-form pieces of `∫ φ(x) 𝒩(x; c, Q) dx` and of the twisted
/// proposal `𝒩(μ, Σ) ∝ φ·𝒩(c, Q)` for a fixed `φ` and `Q`.
///
/// With `Q = L·Lᵀ` and `M = I + LᵀΓL = N·Nᵀ`, `Σ = A·Aᵀ` where `A = L·N⁻ᵀ`.
#[derive(Debug, Clone)]
pub struct TwistKernel {
    params: TwistParams,
    a: DMatrix<f64>,
    half_log_det_m: f64,
}

/// `μ` and `log Ṽ = log ∫ φ(x) 𝒩(x; c, Q) dx` for one drift mean `c`.
#[derive(Debug, Clone)]
pub struct TwistedMoments {
    pub mean: DVector<f64>,
    pub log_v: f64,
}

impl TwistKernel {
    pub fn new(params: TwistParams, q: &Factor) -> Result<Self> {
        let l = q.lower();
        let d = l.nrows();
        if params.gamma.shape() != (d, d) || params.beta.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "twisting parameters of dimension {} for covariance of dimension {d}",
                params.beta.len()
            )));
        }
        let m = symmetrize(&(DMatrix::identity(d, d) + l.transpose() * &params.gamma * &l));
        let mf = chol_psd(&m)?;
        let n_lower = mf.lower();
        let ninv_lt = n_lower
            .solve_lower_triangular(&l.transpose())
            .ok_or(Error::NotPositiveDefinite { jitter: mf.jitter() })?;
        Ok(Self {
            params,
            a: ninv_lt.transpose(),
            half_log_det_m: 0.5 * mf.log_det(),
        })
    }

    pub fn params(&self) -> &TwistParams {
        &self.params
    }

    /// `Σ = (Q⁻¹ + Γ)⁻¹`.
    pub fn cov(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }

    pub fn moments(&self, c: &DVector<f64>) -> TwistedMoments {
        let b = &self.params.beta - &self.params.gamma * c;
        let atb = self.a.transpose() * &b;
        TwistedMoments {
            mean: c + &self.a * &atb,
            log_v: self.params.log_phi(c) - self.half_log_det_m + 0.5 * atb.norm_squared(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(mean.len(), |_, _| rng.sample(rand_distr::StandardNormal));
        mean + &self.a * z
    }
}

/// `q̃ = 𝒩(μ, Σ)` with `Σ = (Q⁻¹ + Γ)⁻¹`, `μ = Σ(Q⁻¹c + β)`, where `base`
/// is `𝒩(c, Q)`.
pub fn twisted_proposal_moments(params: &TwistParams, base: &Gaussian) -> Result<Gaussian> {
    let kernel = TwistKernel::new(params.clone(), base.factor())?;
    let m = kernel.moments(base.mean());
    Gaussian::new(m.mean, kernel.cov())
}

/// `log Ṽ = log ∫ φ(x) 𝒩(x; c, Q) dx` with `base = 𝒩(c, Q)`.
pub fn log_v(params: &TwistParams, base: &Gaussian) -> Result<f64> {
    Ok(TwistKernel::new(params.clone(), base.factor())?.moments(base.mean()).log_v)
}

/// Initial twisted likelihood estimate `log Z̃₀`, where the integral of
/// `ψ₀q₀ = μ₀φ₀` is evaluated in closed form.
pub fn log_z0_twist(params0: &TwistParams, initial: &Gaussian, log_sum_w0: f64, log_sum_psi0: f64) -> Result<f64> {
    Ok(log_v(params0, initial)? + log_sum_w0 - log_sum_psi0)
}

/// `log ψ_k(x) = log f_k(x | prev) + log φ(x) − log q_k(x | prev)`.
pub fn log_psi<M: GaussianSsm + ?Sized>(
    params: &TwistParams,
    model: &M,
    k: usize,
    prev: &DVector<f64>,
    x: &DVector<f64>,
    proposal: &ParticleProposal<'_>,
) -> f64 {
    params.log_phi(x) + proposal.log_ratio(model, k, prev, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smc::{particle_proposal, ProposalKind};
    use crate::ssm::{linear_gaussian_model, range_bearing_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn params1(log_alpha: f64, beta: f64, gamma: f64) -> TwistParams {
        TwistParams {
            log_alpha,
            beta: v1(beta),
            gamma: m1(gamma),
            l: 0,
        }
    }

    fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
    }

    /// Composite Simpson rule on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn init_with_zero_jacobian_is_constant_density() {
        let lin = ObsLinearization {
            h: DMatrix::zeros(2, 3),
            h_hat: DVector::from_vec(vec![1.0, 2.0]),
            y: DVector::from_vec(vec![1.5, 1.0]),
            r: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        };
        let p = twist_init(&lin).unwrap();
        assert_eq!(p.beta, DVector::zeros(3));
        assert_eq!(p.gamma, DMatrix::zeros(3, 3));
        let g = Gaussian::new(lin.h_hat.clone(), lin.r.clone()).unwrap();
        assert!((p.log_alpha - g.logpdf(&lin.y)).abs() < 1e-13);
    }

    #[test]
    fn init_scalar_arithmetic() {
        let lin = ObsLinearization {
            h: m1(1.0),
            h_hat: v1(0.0),
            y: v1(2.0),
            r: m1(1.0),
        };
        let p = twist_init(&lin).unwrap();
        assert!((p.log_alpha - (-2.0 - 0.5 * (2.0 * PI).ln())).abs() < 1e-14);
        assert_eq!(p.beta[0], 2.0);
        assert_eq!(p.gamma[(0, 0)], 1.0);
    }

    #[test]
    fn init_matches_observation_density_on_grid() {
        let (h, hh, y, r) = (0.7, 0.3, -1.2, 0.4);
        let p = twist_init(&ObsLinearization {
            h: m1(h),
            h_hat: v1(hh),
            y: v1(y),
            r: m1(r),
        })
        .unwrap();
        for i in 0..=200 {
            let x = -5.0 + 0.05 * i as f64;
            let direct = normal_pdf(y, h * x + hh, r);
            assert!((p.log_phi(&v1(x)).exp() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_future_measurement_adds_nothing() {
        let lin0 = ObsLinearization {
            h: DMatrix::identity(2, 2),
            h_hat: DVector::zeros(2),
            y: DVector::from_vec(vec![1.0, 2.0]),
            r: DMatrix::identity(2, 2),
        };
        let mut rec = TwistRecursion::new(&lin0).unwrap();
        let before = rec.params().clone();
        let drift = LinearizedDrift {
            c: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            c_hat: DVector::zeros(2),
        };
        let lin1 = ObsLinearization {
            r: DMatrix::identity(2, 2) * 1e12,
            ..lin0.clone()
        };
        rec.step(&drift, &(DMatrix::identity(2, 2) * 0.5), &lin1).unwrap();
        assert!((&rec.params().beta - &before.beta).amax() < 1e-9);
        assert!((&rec.params().gamma - &before.gamma).amax() < 1e-9);
    }

    fn scalar_model(a: f64, q: f64, h: f64, r: f64) -> crate::ssm::LinearGaussianModel {
        linear_gaussian_model(m1(a), m1(q), m1(h), m1(r), v1(0.2), m1(1.5)).unwrap()
    }

    /// `log p(y_{k..k+l} | x_k = x)` for a scalar linear model: the joint of the
    /// observations is Gaussian with mean `hᵢaⁱx` and covariance assembled from
    /// the accumulated process noise.
    fn scalar_lookahead_oracle(a: f64, q: f64, h: f64, r: f64, ys: &[f64], x: f64) -> f64 {
        let l = ys.len();
        let mut var_x = vec![0.0; l];
        for s in 1..l {
            var_x[s] = a * a * var_x[s - 1] + q;
        }
        let mut cov = DMatrix::zeros(l, l);
        let mut mean = DVector::zeros(l);
        for i in 0..l {
            mean[i] = h * a.powi(i as i32) * x;
            for j in 0..l {
                let (lo, hi) = (i.min(j), i.max(j));
                cov[(i, j)] = h * h * a.powi((hi - lo) as i32) * var_x[lo];
            }
            cov[(i, i)] += r;
        }
        let inv = cov.clone().try_inverse().unwrap();
        let resid = DVector::from_column_slice(ys) - mean;
        -0.5 * (resid.dot(&(&inv * &resid)) + cov.determinant().ln() + l as f64 * (2.0 * PI).ln())
    }

    #[test]
    fn lookahead_matches_joint_gaussian_oracle() {
        let (a, q, h, r) = (0.8, 0.6, 1.3, 0.5);
        let model = scalar_model(a, q, h, r);
        let ys: Vec<DVector<f64>> = [0.4, -0.3, 1.1, 0.9].iter().map(|&y| v1(y)).collect();
        for l in 0..ys.len() {
            let p = twist_local(&model, 2, &v1(0.7), &ys[..=l], true).unwrap();
            assert_eq!(p.l, l);
            let raw: Vec<f64> = ys[..=l].iter().map(|y| y[0]).collect();
            for i in 0..=100 {
                let x = -4.0 + 0.08 * i as f64;
                let oracle = scalar_lookahead_oracle(a, q, h, r, &raw, x);
                assert!((p.log_phi(&v1(x)) - oracle).abs() < 1e-8, "l={l} x={x}");
            }
            // at x = 0 the quadratic form reduces to log α
            assert!((p.log_alpha - scalar_lookahead_oracle(a, q, h, r, &raw, 0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_model_local_parameters_do_not_depend_on_particle() {
        let model = linear_gaussian_model(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]),
            DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
            m1(0.4),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let ys: Vec<DVector<f64>> = (0..4).map(|i| v1(0.3 * i as f64 - 0.2)).collect();
        let particles: Vec<DVector<f64>> =
            (0..5).map(|i| DVector::from_vec(vec![i as f64 - 2.0, 0.5 * i as f64])).collect();
        let all = twist_local_all(&model, 3, &particles, &ys, true);
        for p in &all[1..] {
            assert!((p.log_alpha - all[0].log_alpha).abs() < 1e-10);
            assert!((&p.beta - &all[0].beta).amax() < 1e-10);
            assert!((&p.gamma - &all[0].gamma).amax() < 1e-10);
        }
        let mode = twist_mode(&model, 3, &particles, &ys, true).unwrap();
        assert!((mode.log_alpha - all[0].log_alpha).abs() < 1e-8);
        assert!((&mode.beta - &all[0].beta).amax() < 1e-8);
        assert!((&mode.gamma - &all[0].gamma).amax() < 1e-8);
        let eig = all[0].gamma.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn relinearization_toggle_is_inert_for_linear_models() {
        let model = scalar_model(0.9, 0.4, 2.0, 0.3);
        let ys: Vec<DVector<f64>> = (0..3).map(|i| v1(i as f64)).collect();
        let a = twist_local(&model, 1, &v1(0.5), &ys, true).unwrap();
        let b = twist_local(&model, 1, &v1(0.5), &ys, false).unwrap();
        assert!((a.log_alpha - b.log_alpha).abs() < 1e-10);
        assert!((a.beta - b.beta).amax() < 1e-10);
    }

    #[test]
    fn nonlinear_local_parameters_match_straight_line_recomputation() {
        let model = range_bearing_model(0.1, 25.0, 1e-3, 1.0).unwrap();
        let ys: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![145.0, 0.80]),
            DVector::from_vec(vec![146.0, 0.79]),
            DVector::from_vec(vec![148.0, 0.78]),
        ];
        let particles = [
            DVector::from_vec(vec![100.0, 100.0, 1.0, 0.0]),
            DVector::from_vec(vec![95.0, 108.0, 0.5, 0.5]),
            DVector::from_vec(vec![110.0, 96.0, 0.0, -0.5]),
        ];
        let all = twist_local_all(&model, 1, &particles, &ys, true);
        for (xi, p) in particles.iter().zip(&all) {
            let oracle = straight_line_local(&model, xi, &ys);
            assert!((p.log_alpha - oracle.log_alpha).abs() < 1e-10 * oracle.log_alpha.abs().max(1.0));
            assert!((&p.beta - &oracle.beta).amax() < 1e-10 * oracle.beta.amax().max(1.0));
            assert!((&p.gamma - &oracle.gamma).amax() < 1e-10 * oracle.gamma.amax().max(1.0));
        }
    }

    /// Direct transcription of the local EKF linearization with explicit
    /// matrix inverses.
    fn straight_line_local(model: &crate::ssm::RangeBearingModel, xi: &DVector<f64>, ys: &[DVector<f64>]) -> TwistParams {
        let f = model.drift_jacobian(0, xi);
        let q = model.process_noise(0).cov().clone();
        let r = model.obs_noise(0).cov().clone();
        let rinv = r.clone().try_inverse().unwrap();
        let wrap = |v: &mut DVector<f64>| v[1] = crate::ssm::wrap_angle(v[1]);
        // EKF pass
        let mut x = &f * xi;
        let mut p = q.clone();
        let mut hs = Vec::new();
        let mut hhats = Vec::new();
        let mut yeffs = Vec::new();
        for (s, y) in ys.iter().enumerate() {
            if s > 0 {
                x = &f * &x;
                p = &f * &p * f.transpose() + &q;
            }
            let hm = model.observe_jacobian(0, &x).unwrap();
            let sm = &hm * &p * hm.transpose() + &r;
            let g = &p * hm.transpose() * sm.clone().try_inverse().unwrap();
            let mut innov = y - model.observe(0, &x).unwrap();
            wrap(&mut innov);
            x = &x + &g * innov;
            p = &p - &g * &sm * g.transpose();
            let h = model.observe_jacobian(0, &x).unwrap();
            let hx = model.observe(0, &x).unwrap();
            let mut resid = y - &hx;
            wrap(&mut resid);
            hhats.push(&hx - &h * &x);
            yeffs.push(hx + resid);
            hs.push(h);
        }
        // parameter recursion
        let e0 = &yeffs[0] - &hhats[0];
        let mut log_alpha =
            -0.5 * e0.dot(&(&rinv * &e0)) - 0.5 * ((2.0 * PI).powi(2) * r.determinant()).ln();
        let mut beta = hs[0].transpose() * &rinv * &e0;
        let mut gamma = hs[0].transpose() * &rinv * &hs[0];
        let mut d = f.clone();
        let mut kk = q.clone();
        let mut v = DVector::zeros(4);
        for s in 1..ys.len() {
            let h = &hs[s];
            let eps = &yeffs[s] - &hhats[s] - h * &v;
            let sm = h * &kk * h.transpose() + &r;
            let sinv = sm.clone().try_inverse().unwrap();
            let g = &kk * h.transpose() * &sinv;
            log_alpha += -0.5 * eps.dot(&(&sinv * &eps)) - 0.5 * ((2.0 * PI).powi(2) * sm.determinant()).ln();
            beta += (h * &d).transpose() * &sinv * &eps;
            gamma += (h * &d).transpose() * &sinv * h * &d;
            d = (&f - &f * &g * h) * &d;
            kk = &f * (&kk - &g * &sm * g.transpose()) * f.transpose() + &q;
            v = &f * (&v + &g * &eps);
        }
        TwistParams { log_alpha, beta, gamma, l: ys.len() - 1 }
    }

    #[test]
    fn k0_without_lookahead_is_observation_density() {
        let model = scalar_model(0.9, 0.4, 1.7, 0.3);
        let y = v1(0.9);
        let p = twist_local_k0(&model, std::slice::from_ref(&y), true).unwrap();
        for i in 0..50 {
            let x = -2.0 + 0.1 * i as f64;
            assert!((p.log_phi(&v1(x)) - normal_pdf(0.9, 1.7 * x, 0.3).ln()).abs() < 1e-12);
        }
        let again = twist_local_k0(&model, std::slice::from_ref(&y), true).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn single_particle_mode_fit_is_pure_jitter() {
        let model = scalar_model(0.9, 0.4, 1.0, 0.3);
        let prior = fit_predicted(&model, 1, &[v1(2.0)]).unwrap();
        assert!((prior.mean()[0] - 1.8).abs() < 1e-15);
        assert!((prior.cov()[(0, 0)] - MODE_FIT_JITTER).abs() < 1e-18);
    }

    #[test]
    fn untwisted_proposal_is_base() {
        let base = Gaussian::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let g = twisted_proposal_moments(&TwistParams::unit(2), &base).unwrap();
        assert!((g.mean() - base.mean()).amax() < 1e-14);
        assert!((g.cov() - base.cov()).amax() < 1e-14);
        let mut p = TwistParams::unit(2);
        p.log_alpha = 0.7;
        assert!((log_v(&p, &base).unwrap() - 0.7).abs() < 1e-14);
    }

    #[test]
    fn scalar_twisted_moments() {
        let base = Gaussian::new(v1(2.0), m1(1.0)).unwrap();
        let g = twisted_proposal_moments(&params1(0.0, 0.0, 1.0), &base).unwrap();
        assert!((g.cov()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((g.mean()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn twisted_density_proportional_to_product_on_grid() {
        let base = Gaussian::new(v1(0.4), m1(0.8)).unwrap();
        let p = params1(-0.3, 1.2, 0.9);
        let g = twisted_proposal_moments(&p, &base).unwrap();
        let log_ratio = |x: f64| base.logpdf(&v1(x)) + p.log_phi(&v1(x)) - g.logpdf(&v1(x));
        let r0 = log_ratio(0.0);
        for i in 0..=100 {
            let x = -4.0 + 0.08 * i as f64;
            assert!((log_ratio(x) - r0).abs() < 1e-10);
        }
        // the constant of proportionality is Ṽ
        assert!((r0 - log_v(&p, &base).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn log_v_matches_quadrature_and_textbook_form() {
        for (c, q, la, b, gm) in [(0.4, 0.8, -0.3, 1.2, 0.9), (-2.0, 3.0, 1.0, -0.5, 0.1), (5.0, 0.1, 0.0, 3.0, 4.0)] {
            let p = params1(la, b, gm);
            let base = Gaussian::new(v1(c), m1(q)).unwrap();
            let lv = log_v(&p, &base).unwrap();
            let sd = q.sqrt();
            let quad = simpson(|x| p.log_phi(&v1(x)).exp() * normal_pdf(x, c, q), c - 12.0 * sd, c + 12.0 * sd, 4000);
            assert!((lv - quad.ln()).abs() < 1e-8);
            let sigma = 1.0 / (1.0 / q + gm);
            let mu = sigma * (c / q + b);
            let textbook = la + 0.5 * sigma.ln() - 0.5 * q.ln() + 0.5 * mu * mu / sigma - 0.5 * c * c / q;
            assert!((lv - textbook).abs() < 1e-10);
            let mut shifted = p.clone();
            shifted.log_alpha += 2.5;
            assert!((log_v(&shifted, &base).unwrap() - lv - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn log_z0_reduces_for_constant_psi() {
        let init = Gaussian::new(v1(0.0), m1(1.0)).unwrap();
        let lw = [-1.0, -2.0, -0.5];
        let lse = crate::gauss::log_sum_exp(&lw).unwrap();
        let n = lw.len() as f64;
        let v = log_z0_twist(&TwistParams::unit(1), &init, lse, n.ln()).unwrap();
        assert!((v - (lse - n.ln())).abs() < 1e-14);
    }

    #[test]
    fn log_psi_bootstrap_and_ekf() {
        let model = range_bearing_model(0.2, 25.0, 1e-3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = DVector::from_vec(vec![100.0, 90.0, 1.0, 0.5]);
        let y = DVector::from_vec(vec![137.0, 0.74]);
        let p = twist_local(&model, 1, &prev, std::slice::from_ref(&y), true).unwrap();
        let boot = particle_proposal(ProposalKind::Bootstrap, &model, 1, &prev, &y).unwrap();
        let ekf = particle_proposal(ProposalKind::Ekf, &model, 1, &prev, &y).unwrap();
        for _ in 0..20 {
            let x = ekf.sample(&mut rng);
            assert_eq!(log_psi(&p, &model, 1, &prev, &x, &boot), p.log_phi(&x));
            let direct = model.transition_logpdf(1, &prev, &x) + p.log_phi(&x) - ekf.logpdf(&model, 1, &prev, &x);
            assert!((log_psi(&p, &model, 1, &prev, &x, &ekf) - direct).abs() < 1e-12);
            let flat = TwistParams::unit(4);
            let ratio = model.transition_logpdf(1, &prev, &x) - ekf.logpdf(&model, 1, &prev, &x);
            assert!((log_psi(&flat, &model, 1, &prev, &x, &ekf) - ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_samples_have_twisted_moments() {
        let base = Gaussian::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.5])).unwrap();
        let p = TwistParams {
            log_alpha: 0.0,
            beta: DVector::from_vec(vec![0.5, -1.0]),
            gamma: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            l: 0,
        };
        let target = twisted_proposal_moments(&p, &base).unwrap();
        let kernel = TwistKernel::new(p, base.factor()).unwrap();
        let mean = kernel.moments(base.mean()).mean;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = 50_000;
        let acc = (0..reps).fold(DVector::zeros(2), |acc, _| acc + kernel.sample(&mean, &mut rng));
        let emp = acc / reps as f64;
        for i in 0..2 {
            let se = (target.cov()[(i, i)] / reps as f64).sqrt();
            assert!((emp[i] - target.mean()[i]).abs() < 4.0 * se);
        }
    }
}
