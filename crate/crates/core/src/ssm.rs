//! Nonlinear Gaussian state-space models.
//!
//! A model is `x₀ ~ 𝒩(ν₀, P₀)`, `x_{k+1} ~ 𝒩(c_k(x_k), Q_k)` and
//! `y_k ~ 𝒩(h_k(x_k), R_k)`. Time indices follow the source state: `drift(k, ·)`
//! is the mean of `x_{k+1}` and `process_noise(k)` its covariance.

use std::borrow::Cow;
use std::collections::HashSet;
use std::f64::consts::{LN_10, PI};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{log_normal_residual, Gaussian};

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub trait GaussianSsm: Send + Sync {
    fn state_dim(&self) -> usize;

    fn obs_dim(&self, k: usize) -> usize;

    /// `𝒩(ν₀, P₀)`.
    fn initial(&self) -> &Gaussian;

    /// `c_k(x)`, the mean of `x_{k+1}` given `x_k = x`.
    fn drift(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;

    fn drift_jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64>;

    /// Zero-mean `𝒩(0, Q_k)`.
    fn process_noise(&self, k: usize) -> Cow<'_, Gaussian>;

    /// `h_k(x)`.
    fn observe(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn observe_jacobian(&self, k: usize, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Zero-mean `𝒩(0, R_k)`.
    fn obs_noise(&self, k: usize) -> Cow<'_, Gaussian>;

    /// Maps angular residual components back to `(-π, π]`.
    fn wrap_residual(&self, _k: usize, _r: &mut DVector<f64>) {}

    /// Missing-column layout of simulated observations, if any.
    fn column_layout(&self, _t: usize) -> Option<ObsLayout> {
        None
    }

    fn obs_residual(&self, k: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut r = y - self.observe(k, x)?;
        self.wrap_residual(k, &mut r);
        Ok(r)
    }

    /// `log g_k(y | x)`.
    fn obs_logpdf(&self, k: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r = self.obs_residual(k, y, x)?;
        Ok(log_normal_residual(&r, self.obs_noise(k).factor()))
    }

    /// `log f_k(x | prev)`: density of `x_k = x` given `x_{k-1} = prev`.
    fn transition_logpdf(&self, k: usize, prev: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let r = x - self.drift(k - 1, prev);
        log_normal_residual(&r, self.process_noise(k - 1).factor())
    }
}

impl<M: GaussianSsm + ?Sized> GaussianSsm for &M {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn obs_dim(&self, k: usize) -> usize {
        (**self).obs_dim(k)
    }
    fn initial(&self) -> &Gaussian {
        (**self).initial()
    }
    fn drift(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        (**self).drift(k, x)
    }
    fn drift_jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        (**self).drift_jacobian(k, x)
    }
    fn process_noise(&self, k: usize) -> Cow<'_, Gaussian> {
        (**self).process_noise(k)
    }
    fn observe(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).observe(k, x)
    }
    fn observe_jacobian(&self, k: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).observe_jacobian(k, x)
    }
    fn obs_noise(&self, k: usize) -> Cow<'_, Gaussian> {
        (**self).obs_noise(k)
    }
    fn wrap_residual(&self, k: usize, r: &mut DVector<f64>) {
        (**self).wrap_residual(k, r)
    }
    fn column_layout(&self, t: usize) -> Option<ObsLayout> {
        (**self).column_layout(t)
    }
    fn obs_logpdf(&self, k: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        (**self).obs_logpdf(k, y, x)
    }
    fn transition_logpdf(&self, k: usize, prev: &DVector<f64>, x: &DVector<f64>) -> f64 {
        (**self).transition_logpdf(k, prev, x)
    }
}

impl<M: GaussianSsm + ?Sized> GaussianSsm for Box<M> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn obs_dim(&self, k: usize) -> usize {
        (**self).obs_dim(k)
    }
    fn initial(&self) -> &Gaussian {
        (**self).initial()
    }
    fn drift(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        (**self).drift(k, x)
    }
    fn drift_jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        (**self).drift_jacobian(k, x)
    }
    fn process_noise(&self, k: usize) -> Cow<'_, Gaussian> {
        (**self).process_noise(k)
    }
    fn observe(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).observe(k, x)
    }
    fn observe_jacobian(&self, k: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).observe_jacobian(k, x)
    }
    fn obs_noise(&self, k: usize) -> Cow<'_, Gaussian> {
        (**self).obs_noise(k)
    }
    fn wrap_residual(&self, k: usize, r: &mut DVector<f64>) {
        (**self).wrap_residual(k, r)
    }
    fn column_layout(&self, t: usize) -> Option<ObsLayout> {
        (**self).column_layout(t)
    }
    fn obs_logpdf(&self, k: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        (**self).obs_logpdf(k, y, x)
    }
    fn transition_logpdf(&self, k: usize, prev: &DVector<f64>, x: &DVector<f64>) -> f64 {
        (**self).transition_logpdf(k, prev, x)
    }
}

/// Which observation columns are present at each time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsLayout {
    pub width: usize,
    pub visible: Vec<Vec<usize>>,
}

/// Realized measurements `y₀:t`, optionally with the simulated states.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<DVector<f64>>,
    pub truth: Option<Vec<DVector<f64>>>,
    pub layout: Option<ObsLayout>,
}

impl Dataset {
    pub fn new(observations: Vec<DVector<f64>>) -> Self {
        Self {
            observations,
            truth: None,
            layout: None,
        }
    }

    /// Final time index `t`.
    pub fn horizon(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Checks counts and per-step dimensions against `model`.
    pub fn validate<M: GaussianSsm + ?Sized>(&self, model: &M) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Dataset("no observations".into()));
        }
        for (k, y) in self.observations.iter().enumerate() {
            if y.len() != model.obs_dim(k) {
                return Err(Error::Dataset(format!(
                    "observation {k} has dimension {} but the model expects {}",
                    y.len(),
                    model.obs_dim(k)
                )));
            }
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.observations.len() {
                return Err(Error::Dataset("truth and observation counts differ".into()));
            }
        }
        Ok(())
    }

    /// Writes `k,y1..ym[,x1..xd]`; absent observation columns are empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let width = match &self.layout {
            Some(l) => l.width,
            None => self.observations.iter().map(|y| y.len()).max().unwrap_or(0),
        };
        let d = self
            .truth
            .as_ref()
            .and_then(|t| t.first())
            .map(|x| x.len())
            .unwrap_or(0);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["k".to_string()];
        header.extend((1..=width).map(|i| format!("y{i}")));
        header.extend((1..=d).map(|i| format!("x{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (k, y) in self.observations.iter().enumerate() {
            let mut row = vec![String::new(); 1 + width + d];
            row[0] = k.to_string();
            let cols: Vec<usize> = match &self.layout {
                Some(l) => l.visible[k].clone(),
                None => (0..y.len()).collect(),
            };
            for (v, c) in y.iter().zip(cols) {
                row[1 + c] = fmt_f64(*v);
            }
            if let Some(truth) = &self.truth {
                for (i, v) in truth[k].iter().enumerate() {
                    row[1 + width + i] = fmt_f64(*v);
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Dataset(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("k") {
            return Err(Error::Dataset("first column must be `k`".into()));
        }
        let width = header.iter().filter(|h| h.starts_with('y')).count();
        let d = header.iter().filter(|h| h.starts_with('x')).count();
        if 1 + width + d != header.len() {
            return Err(Error::Dataset("unexpected column names".into()));
        }
        let mut observations = Vec::new();
        let mut visible = Vec::new();
        let mut truth = Vec::new();
        let mut any_missing = false;
        for (row_idx, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let k: usize = rec
                .get(0)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("row {row_idx}: bad time index")))?;
            if k != row_idx {
                return Err(Error::Dataset(format!("row {row_idx} has time index {k}")));
            }
            let mut ys = Vec::new();
            let mut cols = Vec::new();
            for c in 0..width {
                let f = rec.get(1 + c).unwrap_or("").trim();
                if f.is_empty() {
                    any_missing = true;
                    continue;
                }
                ys.push(parse_field(f, row_idx)?);
                cols.push(c);
            }
            observations.push(DVector::from_vec(ys));
            visible.push(cols);
            if d > 0 {
                let xs = (0..d)
                    .map(|i| parse_field(rec.get(1 + width + i).unwrap_or("").trim(), row_idx))
                    .collect::<Result<Vec<_>>>()?;
                truth.push(DVector::from_vec(xs));
            }
        }
        if observations.is_empty() {
            return Err(Error::Dataset("no rows".into()));
        }
        Ok(Self {
            observations,
            truth: (d > 0).then_some(truth),
            layout: any_missing.then_some(ObsLayout { width, visible }),
        })
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_field(f: &str, row: usize) -> Result<f64> {
    f.parse()
        .map_err(|_| Error::Dataset(format!("row {row}: cannot parse `{f}`")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(e.to_string())
}

/// Draws a state trajectory and measurements `y₀:t` from `model`.
pub fn simulate<M: GaussianSsm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    t: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let mut truth = Vec::with_capacity(t + 1);
    let mut observations = Vec::with_capacity(t + 1);
    let mut x = model.initial().sample(rng);
    for k in 0..=t {
        if k > 0 {
            let noise = model.process_noise(k - 1);
            x = model.drift(k - 1, &x) + noise.sample(rng);
        }
        let y = model.observe(k, &x)? + model.obs_noise(k).sample(rng);
        observations.push(y);
        truth.push(x.clone());
    }
    Ok(Dataset {
        observations,
        truth: Some(truth),
        layout: model.column_layout(t),
    })
}

/// Parameter vector with positional names.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl Theta {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} names for {} values",
                names.len(),
                values.len()
            )));
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidParameter("parameter names must be unique".into()));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Maps a parameter vector to a model instance.
pub trait ModelFamily: Sync {
    type Model: GaussianSsm;

    fn names(&self) -> Vec<String>;

    fn build(&self, theta: &[f64]) -> Result<Self::Model>;
}

/// Family defined by a closure, mostly for tests and ad-hoc studies.
pub struct FnFamily<F> {
    names: Vec<String>,
    build: F,
}

impl<F> FnFamily<F> {
    pub fn new(names: &[&str], build: F) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            build,
        }
    }
}

impl<F, M> ModelFamily for FnFamily<F>
where
    F: Fn(&[f64]) -> Result<M> + Sync,
    M: GaussianSsm,
{
    type Model = M;

    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn build(&self, theta: &[f64]) -> Result<M> {
        (self.build)(theta)
    }
}

fn check_pd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || nalgebra::Cholesky::new(crate::gauss::symmetrize(m)).is_none() {
        return Err(Error::InvalidParameter(format!("{name} must be positive definite")));
    }
    Ok(())
}

/// `x_{k+1} = A x_k + w`, `y_k = H x_k + v`.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    init: Gaussian,
    process: Gaussian,
    obs: Gaussian,
}

impl LinearGaussianModel {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn q(&self) -> &DMatrix<f64> {
        self.process.cov()
    }
    pub fn r(&self) -> &DMatrix<f64> {
        self.obs.cov()
    }
}

pub fn linear_gaussian_model(
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    nu0: DVector<f64>,
    p0: DMatrix<f64>,
) -> Result<LinearGaussianModel> {
    let d = nu0.len();
    let m = h.nrows();
    let shapes_ok = a.shape() == (d, d)
        && q.shape() == (d, d)
        && p0.shape() == (d, d)
        && h.ncols() == d
        && r.shape() == (m, m);
    if !shapes_ok {
        return Err(Error::ShapeMismatch(format!(
            "A {:?}, Q {:?}, H {:?}, R {:?}, P0 {:?} for state dimension {d}",
            a.shape(),
            q.shape(),
            h.shape(),
            r.shape(),
            p0.shape()
        )));
    }
    check_pd("Q", &q)?;
    check_pd("R", &r)?;
    check_pd("P0", &p0)?;
    Ok(LinearGaussianModel {
        a,
        h,
        init: Gaussian::new(nu0, p0)?,
        process: Gaussian::new(DVector::zeros(d), q)?,
        obs: Gaussian::new(DVector::zeros(m), r)?,
    })
}

impl GaussianSsm for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn obs_dim(&self, _k: usize) -> usize {
        self.h.nrows()
    }
    fn initial(&self) -> &Gaussian {
        &self.init
    }
    fn drift(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn drift_jacobian(&self, _k: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn process_noise(&self, _k: usize) -> Cow<'_, Gaussian> {
        Cow::Borrowed(&self.process)
    }
    fn observe(&self, _k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.h * x)
    }
    fn observe_jacobian(&self, _k: usize, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.h.clone())
    }
    fn obs_noise(&self, _k: usize) -> Cow<'_, Gaussian> {
        Cow::Borrowed(&self.obs)
    }
}

/// Constant-velocity transition `[[I, Δt·I], [0, I]]` and its noise
/// covariance for a 2-d position/velocity state.
pub fn constant_velocity(q2: f64, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut f = DMatrix::identity(4, 4);
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let mut q = DMatrix::zeros(4, 4);
    for i in 0..2 {
        q[(i, i)] = q2 * dt.powi(3) / 3.0;
        q[(i, i + 2)] = q2 * dt.powi(2) / 2.0;
        q[(i + 2, i)] = q2 * dt.powi(2) / 2.0;
        q[(i + 2, i + 2)] = q2 * dt;
    }
    (f, q)
}

/// `ν₀ = [100, 100, 0, 0]ᵀ`, `P₀ = diag(10², 10², 10⁻³, 10⁻³)`.
pub fn range_bearing_prior() -> Gaussian {
    Gaussian::new(
        DVector::from_vec(vec![100.0, 100.0, 0.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 100.0, 1e-3, 1e-3])),
    )
    .expect("diagonal prior is positive definite")
}

const MIN_STATION_DISTANCE: f64 = 1e-6;

/// Constant-velocity target observed in range and bearing from the origin.
#[derive(Debug, Clone)]
pub struct RangeBearingModel {
    f: DMatrix<f64>,
    init: Gaussian,
    process: Gaussian,
    obs: Gaussian,
}

/// Parameter order: `[q², σ₁², σ₂²]`.
pub fn range_bearing_model(q2: f64, sigma1sq: f64, sigma2sq: f64, dt: f64) -> Result<RangeBearingModel> {
    range_bearing_model_with_prior(q2, sigma1sq, sigma2sq, dt, range_bearing_prior())
}

pub fn range_bearing_model_with_prior(
    q2: f64,
    sigma1sq: f64,
    sigma2sq: f64,
    dt: f64,
    init: Gaussian,
) -> Result<RangeBearingModel> {
    for (name, v) in [("q2", q2), ("sigma1sq", sigma1sq), ("sigma2sq", sigma2sq), ("dt", dt)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    if init.dim() != 4 {
        return Err(Error::ShapeMismatch("range-bearing state is 4-dimensional".into()));
    }
    let (f, q) = constant_velocity(q2, dt);
    Ok(RangeBearingModel {
        f,
        init,
        process: Gaussian::new(DVector::zeros(4), q)?,
        obs: Gaussian::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![sigma1sq, sigma2sq])),
        )?,
    })
}

impl GaussianSsm for RangeBearingModel {
    fn state_dim(&self) -> usize {
        4
    }
    fn obs_dim(&self, _k: usize) -> usize {
        2
    }
    fn initial(&self) -> &Gaussian {
        &self.init
    }
    fn drift(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }
    fn drift_jacobian(&self, _k: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        self.f.clone()
    }
    fn process_noise(&self, _k: usize) -> Cow<'_, Gaussian> {
        Cow::Borrowed(&self.process)
    }
    fn observe(&self, _k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![x[0].hypot(x[1]), x[1].atan2(x[0])]))
    }
    fn observe_jacobian(&self, _k: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let r = r2.sqrt();
        if r < MIN_STATION_DISTANCE {
            return Err(Error::SingularGeometry { station: 0, distance: r });
        }
        let mut j = DMatrix::zeros(2, 4);
        j[(0, 0)] = x[0] / r;
        j[(0, 1)] = x[1] / r;
        j[(1, 0)] = -x[1] / r2;
        j[(1, 1)] = x[0] / r2;
        Ok(j)
    }
    fn obs_noise(&self, _k: usize) -> Cow<'_, Gaussian> {
        Cow::Borrowed(&self.obs)
    }
    fn wrap_residual(&self, _k: usize, r: &mut DVector<f64>) {
        r[1] = wrap_angle(r[1]);
    }
    fn obs_logpdf(&self, _k: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r0 = y[0] - x[0].hypot(x[1]);
        let r1 = wrap_angle(y[1] - x[1].atan2(x[0]));
        Ok(log_normal_residual(&DVector::from_vec(vec![r0, r1]), self.obs.factor()))
    }
}

/// Received-signal-strength positioning with a log-distance path-loss model.
#[derive(Debug, Clone)]
pub struct RssModel {
    f: DMatrix<f64>,
    stations: Vec<[f64; 2]>,
    lambdas: Vec<f64>,
    rhos: Vec<f64>,
    sigma2: f64,
    visibility: Vec<Vec<usize>>,
    init: Gaussian,
    process: Gaussian,
}

#[derive(Debug, Clone)]
pub struct RssSpec {
    pub lambdas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub sigma2: f64,
    pub q2: f64,
    pub stations: Vec<[f64; 2]>,
    pub visibility: Vec<Vec<usize>>,
    pub dt: f64,
    pub init: Gaussian,
}

pub fn rss_model(spec: RssSpec) -> Result<RssModel> {
    let n = spec.stations.len();
    if n == 0 || spec.lambdas.len() != n || spec.rhos.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} stations, {} path-loss exponents, {} offsets",
            n,
            spec.lambdas.len(),
            spec.rhos.len()
        )));
    }
    for (name, v) in [("sigma2", spec.sigma2), ("q2", spec.q2), ("dt", spec.dt)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    if spec.visibility.is_empty() {
        return Err(Error::InvalidParameter("visibility schedule is empty".into()));
    }
    for (k, set) in spec.visibility.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::InvalidParameter(format!("no station visible at step {k}")));
        }
        if set.iter().any(|&i| i >= n) || set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "visibility set at step {k} must be sorted station indices"
            )));
        }
    }
    if spec.init.dim() != 4 {
        return Err(Error::ShapeMismatch("RSS state is 4-dimensional".into()));
    }
    let (f, q) = constant_velocity(spec.q2, spec.dt);
    Ok(RssModel {
        f,
        stations: spec.stations,
        lambdas: spec.lambdas,
        rhos: spec.rhos,
        sigma2: spec.sigma2,
        visibility: spec.visibility,
        init: spec.init,
        process: Gaussian::new(DVector::zeros(4), q)?,
    })
}

impl RssModel {
    pub fn visible(&self, k: usize) -> &[usize] {
        let last = self.visibility.len() - 1;
        &self.visibility[k.min(last)]
    }

    fn station_offset(&self, i: usize, x: &DVector<f64>) -> Result<(f64, f64, f64)> {
        let [sx, sy] = self.stations[i];
        let (dx, dy) = (x[0] - sx, x[1] - sy);
        let dist = dx.hypot(dy);
        if dist < MIN_STATION_DISTANCE {
            return Err(Error::SingularGeometry { station: i, distance: dist });
        }
        Ok((dx, dy, dist))
    }
}

/// Samples visibility sets, each station present independently with
/// probability `p`; empty draws are replaced by the single nearest-index
/// station chosen uniformly.
pub fn sample_visibility<R: Rng + ?Sized>(n_stations: usize, steps: usize, p: f64, rng: &mut R) -> Vec<Vec<usize>> {
    (0..steps)
        .map(|_| {
            let set: Vec<usize> = (0..n_stations).filter(|_| rng.random::<f64>() < p).collect();
            if set.is_empty() {
                vec![rng.random_range(0..n_stations)]
            } else {
                set
            }
        })
        .collect()
}

impl GaussianSsm for RssModel {
    fn state_dim(&self) -> usize {
        4
    }
    fn obs_dim(&self, k: usize) -> usize {
        self.visible(k).len()
    }
    fn initial(&self) -> &Gaussian {
        &self.init
    }
    fn drift(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }
    fn drift_jacobian(&self, _k: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        self.f.clone()
    }
    fn process_noise(&self, _k: usize) -> Cow<'_, Gaussian> {
        Cow::Borrowed(&self.process)
    }
    fn observe(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let vis = self.visible(k);
        let mut y = DVector::zeros(vis.len());
        for (row, &i) in vis.iter().enumerate() {
            let (_, _, dist) = self.station_offset(i, x)?;
            y[row] = self.rhos[i] - 10.0 * self.lambdas[i] * dist.log10();
        }
        Ok(y)
    }
    fn observe_jacobian(&self, k: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let vis = self.visible(k);
        let mut j = DMatrix::zeros(vis.len(), 4);
        for (row, &i) in vis.iter().enumerate() {
            let (dx, dy, dist) = self.station_offset(i, x)?;
            let scale = -10.0 * self.lambdas[i] / (LN_10 * dist * dist);
            j[(row, 0)] = scale * dx;
            j[(row, 1)] = scale * dy;
        }
        Ok(j)
    }
    fn obs_noise(&self, k: usize) -> Cow<'_, Gaussian> {
        let m = self.obs_dim(k);
        Cow::Owned(
            Gaussian::new(DVector::zeros(m), DMatrix::identity(m, m) * self.sigma2)
                .expect("positive variance"),
        )
    }
    fn column_layout(&self, t: usize) -> Option<ObsLayout> {
        Some(ObsLayout {
            width: self.stations.len(),
            visible: (0..=t).map(|k| self.visible(k).to_vec()).collect(),
        })
    }
    fn obs_logpdf(&self, k: usize, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r = y - self.observe(k, x)?;
        let m = r.len() as f64;
        Ok(-0.5 * (m * (2.0 * PI * self.sigma2).ln() + r.norm_squared() / self.sigma2))
    }
}

/// Range-bearing family, `θ = [q², σ₁², σ₂²]`.
#[derive(Debug, Clone)]
pub struct RangeBearingFamily {
    pub dt: f64,
}

impl ModelFamily for RangeBearingFamily {
    type Model = RangeBearingModel;

    fn names(&self) -> Vec<String> {
        vec!["q2".into(), "sigma1sq".into(), "sigma2sq".into()]
    }

    fn build(&self, theta: &[f64]) -> Result<RangeBearingModel> {
        if theta.len() != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 parameters, got {}", theta.len())));
        }
        range_bearing_model(theta[0], theta[1], theta[2], self.dt)
    }
}

/// RSS family, `θ = [λ₁, ρ₁, λ₂, ρ₂, …, q², σ²]` so that each station's pair
/// is a contiguous block.
#[derive(Debug, Clone)]
pub struct RssFamily {
    pub stations: Vec<[f64; 2]>,
    pub visibility: Vec<Vec<usize>>,
    pub dt: f64,
    pub init: Gaussian,
}

impl ModelFamily for RssFamily {
    type Model = RssModel;

    fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.stations.len() {
            names.push(format!("lambda{i}"));
            names.push(format!("rho{i}"));
        }
        names.push("q2".into());
        names.push("sigma2".into());
        names
    }

    fn build(&self, theta: &[f64]) -> Result<RssModel> {
        let n = self.stations.len();
        if theta.len() != 2 * n + 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                2 * n + 2,
                theta.len()
            )));
        }
        rss_model(RssSpec {
            lambdas: (0..n).map(|i| theta[2 * i]).collect(),
            rhos: (0..n).map(|i| theta[2 * i + 1]).collect(),
            q2: theta[2 * n],
            sigma2: theta[2 * n + 1],
            stations: self.stations.clone(),
            visibility: self.visibility.clone(),
            dt: self.dt,
            init: self.init.clone(),
        })
    }
}
