//! Shared test oracles: joint-Gaussian assembly for linear models, dense
//! Gaussian conditioning, and small random model generators.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use twisted_smc::ssm::{linear_gaussian_model, GaussianSsm, LinearGaussianModel};

/// Stacked `(x₀, …, x_t, y₀, …, y_t)` mean and covariance of a linear model.
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub dx: usize,
    pub dy: usize,
    pub t: usize,
}

impl JointGaussian {
    pub fn new(model: &LinearGaussianModel, t: usize) -> Self {
        let (a, q, h, r) = (model.a(), model.q(), model.h(), model.r());
        let (nu0, p0) = (model.initial().mean(), model.initial().cov());
        let dx = a.nrows();
        let dy = h.nrows();
        let steps = t + 1;
        let mut means = Vec::with_capacity(steps);
        let mut marg = Vec::with_capacity(steps);
        means.push(nu0.clone());
        marg.push(p0.clone());
        for k in 1..steps {
            means.push(a * &means[k - 1]);
            marg.push(a * &marg[k - 1] * a.transpose() + q);
        }
        let nx = dx * steps;
        let size = nx + dy * steps;
        let mut mean = DVector::zeros(size);
        let mut cov = DMatrix::zeros(size, size);
        // Cov(x_j, x_i) = A^{j-i} Σ_i for j ≥ i
        for i in 0..steps {
            mean.rows_mut(i * dx, dx).copy_from(&means[i]);
            mean.rows_mut(nx + i * dy, dy).copy_from(&(h * &means[i]));
            let mut block = marg[i].clone();
            for j in i..steps {
                if j > i {
                    block = a * block;
                }
                cov.view_mut((j * dx, i * dx), (dx, dx)).copy_from(&block);
                cov.view_mut((i * dx, j * dx), (dx, dx)).copy_from(&block.transpose());
            }
        }
        for i in 0..steps {
            for j in 0..steps {
                let cxx = cov.view((i * dx, j * dx), (dx, dx)).into_owned();
                let mut cyy = h * &cxx * h.transpose();
                if i == j {
                    cyy += r;
                }
                cov.view_mut((nx + i * dy, nx + j * dy), (dy, dy)).copy_from(&cyy);
                // Cov(x_i, y_j) = Cov(x_i, x_j) Hᵀ
                let cxy = &cxx * h.transpose();
                cov.view_mut((i * dx, nx + j * dy), (dx, dy)).copy_from(&cxy);
                cov.view_mut((nx + j * dy, i * dx), (dy, dx)).copy_from(&cxy.transpose());
            }
        }
        Self { mean, cov, dx, dy, t }
    }

    pub fn x_index(&self, k: usize) -> Vec<usize> {
        (k * self.dx..(k + 1) * self.dx).collect()
    }

    pub fn y_index(&self, k: usize) -> Vec<usize> {
        let nx = self.dx * (self.t + 1);
        (nx + k * self.dy..nx + (k + 1) * self.dy).collect()
    }

    pub fn y_range(&self, from: usize, to: usize) -> Vec<usize> {
        (from..=to).flat_map(|k| self.y_index(k)).collect()
    }

    /// `log p(y_{from..=to})`.
    pub fn log_marginal(&self, ys: &[DVector<f64>], from: usize, to: usize) -> f64 {
        let idx = self.y_range(from, to);
        let m = select_vec(&self.mean, &idx);
        let c = select(&self.cov, &idx, &idx);
        let v = DVector::from_iterator(idx.len(), ys[from..=to].iter().flat_map(|y| y.iter().copied()));
        dense_logpdf(&v, &m, &c)
    }

    /// Mean and covariance of `x_k` given `y_{from..=to}`.
    pub fn condition_x(&self, k: usize, ys: &[DVector<f64>], from: usize, to: usize) -> (DVector<f64>, DMatrix<f64>) {
        let xi = self.x_index(k);
        let yi = self.y_range(from, to);
        let v = DVector::from_iterator(yi.len(), ys[from..=to].iter().flat_map(|y| y.iter().copied()));
        condition(&self.mean, &self.cov, &xi, &yi, &v)
    }
}

pub fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Gaussian conditioning through an explicit inverse.
pub fn condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    target: &[usize],
    given: &[usize],
    value: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let saa = select(cov, target, target);
    let sab = select(cov, target, given);
    let sbb_inv = select(cov, given, given).try_inverse().expect("invertible");
    let gain = &sab * sbb_inv;
    let m = select_vec(mean, target) + &gain * (value - select_vec(mean, given));
    let c = saa - &gain * sab.transpose();
    (m, c)
}

/// Gaussian log density from an LU determinant and explicit inverse.
pub fn dense_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let r = x - mean;
    let inv = cov.clone().try_inverse().expect("invertible");
    let det = cov.determinant();
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + r.dot(&(inv * &r)))
}

/// Random stable linear model with well-conditioned covariances.
pub fn random_linear_model<R: Rng>(rng: &mut R, dx: usize, dy: usize) -> LinearGaussianModel {
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let raw = gauss(dx, dx);
    let a = &raw * (0.9 / raw.norm().max(1e-3));
    let lq = gauss(dx, dx);
    let q = &lq * lq.transpose() * 0.2 + DMatrix::identity(dx, dx) * 0.1;
    let h = gauss(dy, dx);
    let lr = gauss(dy, dy);
    let r = &lr * lr.transpose() * 0.2 + DMatrix::identity(dy, dy) * 0.2;
    let nu0 = gauss(dx, 1).column(0).into_owned();
    let lp = gauss(dx, dx);
    let p0 = &lp * lp.transpose() * 0.3 + DMatrix::identity(dx, dx) * 0.5;
    linear_gaussian_model(a, q, h, r, nu0, p0).expect("valid model")
}

/// The fixed two-state, scalar-observation model used across the likelihood
/// tests.
pub fn reference_linear_model() -> LinearGaussianModel {
    use nalgebra::{dmatrix, dvector};
    linear_gaussian_model(
        dmatrix![0.9, 0.2; -0.1, 0.8],
        dmatrix![0.3, 0.05; 0.05, 0.2],
        dmatrix![1.0, -0.5],
        dmatrix![0.4],
        dvector![0.5, -0.2],
        dmatrix![1.0, 0.3; 0.3, 0.8],
    )
    .expect("valid model")
}

/// Linear-domain replicate mean of `exp(log Z)` relative to `exp(reference)`
/// and its standard error, both scaled by `exp(-reference)`.
pub fn relative_mean_and_se(log_z: &[f64], reference: f64) -> (f64, f64) {
    let ratios: Vec<f64> = log_z.iter().map(|l| (l - reference).exp()).collect();
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}
