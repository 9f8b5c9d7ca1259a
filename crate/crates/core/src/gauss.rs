//! Multivariate Gaussian primitives in log domain.
//!
//! Every density in the crate is evaluated through a Cholesky factor; raw
//! determinants are never formed. Factorization escalates a diagonal jitter
//! when the input is only positive semidefinite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative jitter levels tried after an unjittered factorization fails.
const JITTER_SCHEDULE: [f64; 5] = [1e-12, 1e-10, 1e-8, 1e-6, 1e-4];

/// Lower-triangular Cholesky factor of a (possibly jittered) covariance.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Factor {
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Absolute jitter added to the diagonal before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `xᵀ Σ⁻¹ x`, evaluated as the squared norm of `L⁻¹ x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    /// `L z` for a standard-normal draw `z`.
    pub fn color(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().lower_triangle() * z
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factorization with jitter escalation.
///
/// Tries the matrix as given first, then adds `ε·mean(diag)·I` for each
/// `ε` in `1e-12, 1e-10, …, 1e-4`. A matrix with zero mean diagonal uses a
/// unit scale so that an all-zero covariance still factors.
pub fn chol_psd(cov: &DMatrix<f64>) -> Result<Factor> {
    if !cov.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let sym = symmetrize(cov);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let d = sym.nrows();
    let mean_diag = if d == 0 { 0.0 } else { sym.trace() / d as f64 };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut last = 0.0;
    for rel in JITTER_SCHEDULE {
        last = rel * scale;
        let mut m = sym.clone();
        for i in 0..d {
            m[(i, i)] += last;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter: last });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// A multivariate normal with its covariance factor cached.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: Factor,
}

impl Gaussian {
    /// Builds a Gaussian; the covariance is symmetrized before factorization.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        let factor = chol_psd(&cov)?;
        Ok(Self { mean, cov, factor })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity is positive definite")
    }

    /// Same covariance (and factor), different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Self {
        debug_assert_eq!(mean.len(), self.mean.len());
        Self {
            mean,
            cov: self.cov.clone(),
            factor: self.factor.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        log_normal_residual(&(x - &self.mean), &self.factor)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.factor.color(&z)
    }
}

/// Log density of a zero-mean Gaussian with factor `factor` at residual `r`.
pub fn log_normal_residual(r: &DVector<f64>, factor: &Factor) -> f64 {
    -0.5 * (r.len() as f64 * LN_2PI + factor.log_det() + factor.quad_form(r))
}

/// `log 𝒩(x; g.mean, g.cov)`.
pub fn mvn_logpdf(x: &DVector<f64>, g: &Gaussian) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point has length {} but Gaussian has dimension {}",
            x.len(),
            g.dim()
        )));
    }
    Ok(g.logpdf(x))
}

/// Draws `mean + L z` with `z` standard normal.
pub fn mvn_sample<R: Rng + ?Sized>(rng: &mut R, g: &Gaussian) -> DVector<f64> {
    g.sample(rng)
}

/// Numerically stable `log Σ exp(vᵢ)`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllNegInf);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// `log((1/n) Σ exp(vᵢ))`.
pub fn log_mean_exp(v: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(v)? - (v.len() as f64).ln())
}

/// `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
