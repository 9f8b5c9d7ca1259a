//! Twisted particle filter: twisted multinomial and systematic resampling,
//! the twisted likelihood recursion, and the per-step correction factors
//! linking it to the standard estimate.

use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::resample::{cumulative, multinomial_map, open_unit, sample_log_categorical, scaled_cumulative, systematic_map, Resampler};
use crate::smc::{checked_lse, initial_proposal, log_likelihood, particle_proposal, ProposalKind};
use crate::ssm::{Dataset, GaussianSsm};
use crate::twist::{twist_local_all, twist_local_k0, twist_mode, TwistKernel};

/// Outcome of a twisted resampling draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistedDraw {
    /// Slot that will receive a sample from the twisted proposal.
    pub slot: usize,
    /// Ancestor selected for `slot`.
    pub selected: usize,
    /// Resampling uniforms: one per particle (multinomial) or a single one
    /// (systematic).
    pub uniforms: Vec<f64>,
    pub ancestors: Vec<usize>,
}

fn check_lengths(log_w: &[f64], log_v: &[f64]) -> Result<usize> {
    if log_w.len() != log_v.len() || log_w.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights and {} twisting integrals",
            log_w.len(),
            log_v.len()
        )));
    }
    Ok(log_w.len())
}

fn twisted_log_weights(log_w: &[f64], log_v: &[f64]) -> Vec<f64> {
    log_w
        .iter()
        .zip(log_v)
        .map(|(w, v)| if *w == f64::NEG_INFINITY { f64::NEG_INFINITY } else { w + v })
        .collect()
}

/// Uniform on `(lo, hi]`.
fn uniform_in<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    hi - (hi - lo) * rng.random::<f64>()
}

/// Slot uniform, ancestor of the slot proportional to `w·Ṽ`, its uniform
/// drawn inside the selected interval and all other uniforms on `(0, 1]`.
pub fn twisted_multinomial_draw<R: Rng + ?Sized>(log_w: &[f64], log_v: &[f64], rng: &mut R) -> Result<TwistedDraw> {
    let n = check_lengths(log_w, log_v)?;
    let d = cumulative(log_w)?;
    let selected = sample_log_categorical(&twisted_log_weights(log_w, log_v), rng)?;
    let slot = rng.random_range(0..n);
    let lo = if selected == 0 { 0.0 } else { d[selected - 1] };
    let mut uniforms: Vec<f64> = (0..n).map(|_| open_unit(rng)).collect();
    uniforms[slot] = uniform_in(lo, d[selected], rng);
    let mut ancestors = multinomial_map(&uniforms, &d)?;
    if ancestors[slot] != selected {
        uniforms[slot] = d[selected];
        ancestors[slot] = multinomial_map(&uniforms[slot..=slot], &d)?[0];
        if ancestors[slot] != selected {
            log::debug!("twisted multinomial draw: interval of ancestor {selected} vanished in rounding");
            ancestors[slot] = selected;
        }
    }
    Ok(TwistedDraw {
        slot,
        selected,
        uniforms,
        ancestors,
    })
}

/// Nonempty overlaps `(s, j, lo, hi)` of `(n·d^{j-1} − s, n·d^j − s]` with
/// `[0, 1]`.
fn systematic_overlaps(d: &[f64]) -> Vec<(usize, usize, f64, f64)> {
    let n = d.len();
    let e = scaled_cumulative(d);
    let mut out = Vec::with_capacity(2 * n);
    let mut prev = 0.0f64;
    for (j, &ej) in e.iter().enumerate() {
        if ej > prev {
            let s_min = prev.floor() as usize;
            let s_max = ((ej.ceil() as usize).max(1) - 1).min(n - 1);
            for s in s_min..=s_max {
                let lo = (prev - s as f64).max(0.0);
                let hi = (ej - s as f64).min(1.0);
                if hi > lo {
                    out.push((s, j, lo, hi));
                }
            }
        }
        prev = prev.max(ej);
    }
    out
}

/// Slot with probability `∝ Σ_j |I^{s,j}|·Ṽʲ`, ancestor `∝ |I^{S,j}|·Ṽʲ`, and
/// the single uniform drawn inside `I^{S,J}`.
pub fn twisted_systematic_draw<R: Rng + ?Sized>(log_w: &[f64], log_v: &[f64], rng: &mut R) -> Result<TwistedDraw> {
    let n = check_lengths(log_w, log_v)?;
    let d = cumulative(log_w)?;
    let overlaps = systematic_overlaps(&d);
    let log_mass: Vec<f64> = overlaps.iter().map(|&(_, j, lo, hi)| (hi - lo).ln() + log_v[j]).collect();
    let mut per_slot = vec![f64::NEG_INFINITY; n];
    for (&(s, ..), lm) in overlaps.iter().zip(&log_mass) {
        per_slot[s] = crate::gauss::log_add_exp(per_slot[s], *lm);
    }
    let slot = sample_log_categorical(&per_slot, rng).map_err(|_| Error::DegenerateWeights)?;
    let candidates: Vec<usize> = (0..overlaps.len()).filter(|&i| overlaps[i].0 == slot).collect();
    let cand_mass: Vec<f64> = candidates.iter().map(|&i| log_mass[i]).collect();
    let (_, selected, lo, hi) = overlaps[candidates[sample_log_categorical(&cand_mass, rng)?]];
    let mut u = uniform_in(lo, hi, rng);
    let mut ancestors = systematic_map(u, &d);
    if ancestors[slot] != selected {
        u = 0.5 * (lo + hi);
        ancestors = systematic_map(u, &d);
        if ancestors[slot] != selected {
            log::debug!("twisted systematic draw: interval of ancestor {selected} vanished in rounding");
            ancestors[slot] = selected;
        }
    }
    Ok(TwistedDraw {
        slot,
        selected,
        uniforms: vec![u],
        ancestors,
    })
}

pub fn twisted_draw<R: Rng + ?Sized>(resampler: Resampler, log_w: &[f64], log_v: &[f64], rng: &mut R) -> Result<TwistedDraw> {
    match resampler {
        Resampler::Multinomial => twisted_multinomial_draw(log_w, log_v, rng),
        Resampler::Systematic => twisted_systematic_draw(log_w, log_v, rng),
    }
}

/// Twisting function at time zero, acting on `μ₀`.
pub trait InitialTwist {
    /// `log ∫ μ₀(x) φ₀(x) dx`.
    fn log_integral(&self) -> f64;
    /// Draws from the density proportional to `μ₀ φ₀`.
    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64>;
    fn log_phi(&self, x: &DVector<f64>) -> f64;
}

/// Twisting functions at time `k ≥ 1`, one per previous particle `i`.
pub trait StepTwist {
    /// `log ∫ f_k(x | ξ_{k−1}ⁱ) φ_kⁱ(x) dx`.
    fn log_v(&self, i: usize) -> f64;
    /// Draws from the density proportional to `f_k(· | ξ_{k−1}ⁱ) φ_kⁱ`.
    fn sample(&self, i: usize, rng: &mut dyn RngCore) -> DVector<f64>;
    fn log_phi(&self, i: usize, x: &DVector<f64>) -> f64;
}

/// Source of twisting functions for a run. The twisting function seen by the
/// filter is `ψ = f·φ/q`; implementations only supply `φ` and its integrals
/// against the transition density.
pub trait Twisting<M: GaussianSsm + ?Sized> {
    fn initial(&self, model: &M, data: &Dataset) -> Result<Box<dyn InitialTwist>>;
    fn step(&self, model: &M, data: &Dataset, k: usize, prev: &[DVector<f64>]) -> Result<Box<dyn StepTwist>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TwistScheme {
    /// Per-particle EKF linearization from each previous particle.
    Local,
    /// One linearization around the smoothed mode, shared by all particles.
    Mode,
    /// `φ ≡ 1`.
    Unit,
}

impl FromStr for TwistScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Self::Local),
            "mode" => Ok(Self::Mode),
            "unit" => Ok(Self::Unit),
            other => Err(Error::InvalidParameter(format!("unknown twisting scheme `{other}`"))),
        }
    }
}

/// Exponential twisting functions from EKF linearization with lookahead `l`,
/// truncated to `min(l, t − k)` near the end of the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialTwisting {
    pub scheme: TwistScheme,
    pub lookahead: usize,
    pub relinearize: bool,
}

impl ExponentialTwisting {
    pub fn new(scheme: TwistScheme, lookahead: usize) -> Self {
        Self {
            scheme,
            lookahead,
            relinearize: true,
        }
    }

    fn window<'d>(&self, data: &'d Dataset, k: usize) -> &'d [DVector<f64>] {
        let end = (k + self.lookahead).min(data.horizon());
        &data.observations[k..=end]
    }
}

struct GaussianInitial {
    kernel: Option<TwistKernel>,
    mean: DVector<f64>,
    log_integral: f64,
    prior: Gaussian,
}

impl InitialTwist for GaussianInitial {
    fn log_integral(&self) -> f64 {
        self.log_integral
    }
    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        match &self.kernel {
            Some(k) => k.sample(&self.mean, rng),
            None => self.prior.sample(rng),
        }
    }
    fn log_phi(&self, x: &DVector<f64>) -> f64 {
        self.kernel.as_ref().map_or(0.0, |k| k.params().log_phi(x))
    }
}

enum Kernels {
    Unit(Gaussian),
    Shared(TwistKernel),
    PerParticle(Vec<TwistKernel>),
}

struct GaussianStep {
    kernels: Kernels,
    means: Vec<DVector<f64>>,
    log_v: Vec<f64>,
}

impl GaussianStep {
    fn kernel(&self, i: usize) -> Option<&TwistKernel> {
        match &self.kernels {
            Kernels::Unit(_) => None,
            Kernels::Shared(k) => Some(k),
            Kernels::PerParticle(ks) => Some(&ks[i]),
        }
    }
}

impl StepTwist for GaussianStep {
    fn log_v(&self, i: usize) -> f64 {
        self.log_v[i]
    }
    fn sample(&self, i: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        match &self.kernels {
            Kernels::Unit(noise) => &self.means[i] + noise.sample(rng),
            _ => self.kernel(i).expect("twisted kernel").sample(&self.means[i], rng),
        }
    }
    fn log_phi(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.kernel(i).map_or(0.0, |k| k.params().log_phi(x))
    }
}

impl<M: GaussianSsm + ?Sized> Twisting<M> for ExponentialTwisting {
    fn initial(&self, model: &M, data: &Dataset) -> Result<Box<dyn InitialTwist>> {
        let prior = model.initial().clone();
        let unit = |prior: Gaussian| GaussianInitial {
            kernel: None,
            mean: prior.mean().clone(),
            log_integral: 0.0,
            prior,
        };
        if self.scheme == TwistScheme::Unit {
            return Ok(Box::new(unit(prior)));
        }
        let params = match twist_local_k0(model, self.window(data, 0), self.relinearize) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("initial twisting failed: {e}; using a flat twist");
                return Ok(Box::new(unit(prior)));
            }
        };
        let kernel = TwistKernel::new(params, prior.factor())?;
        let m = kernel.moments(prior.mean());
        Ok(Box::new(GaussianInitial {
            kernel: Some(kernel),
            mean: m.mean,
            log_integral: m.log_v,
            prior,
        }))
    }

    fn step(&self, model: &M, data: &Dataset, k: usize, prev: &[DVector<f64>]) -> Result<Box<dyn StepTwist>> {
        let noise = model.process_noise(k - 1).into_owned();
        let means: Vec<DVector<f64>> = prev.iter().map(|x| model.drift(k - 1, x)).collect();
        let ys = self.window(data, k);
        let unit = |noise: Gaussian, means: Vec<DVector<f64>>| GaussianStep {
            log_v: vec![0.0; means.len()],
            kernels: Kernels::Unit(noise),
            means,
        };
        let (kernels, moments) = match self.scheme {
            TwistScheme::Unit => return Ok(Box::new(unit(noise, means))),
            TwistScheme::Mode => {
                let params = match twist_mode(model, k, prev, ys, self.relinearize) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("mode twisting failed at step {k}: {e}; using a flat twist");
                        return Ok(Box::new(unit(noise, means)));
                    }
                };
                let kernel = TwistKernel::new(params, noise.factor())?;
                let moments: Vec<_> = means.iter().map(|c| kernel.moments(c)).collect();
                (Kernels::Shared(kernel), moments)
            }
            TwistScheme::Local => {
                let kernels = twist_local_all(model, k, prev, ys, self.relinearize)
                    .into_iter()
                    .map(|p| TwistKernel::new(p, noise.factor()))
                    .collect::<Result<Vec<_>>>()?;
                let moments: Vec<_> = kernels.iter().zip(&means).map(|(kn, c)| kn.moments(c)).collect();
                (Kernels::PerParticle(kernels), moments)
            }
        };
        let log_v = moments.iter().map(|m| m.log_v).collect();
        let means = moments.into_iter().map(|m| m.mean).collect();
        Ok(Box::new(GaussianStep { kernels, means, log_v }))
    }
}

/// Per-step arrays of a twisted run.
#[derive(Debug, Clone)]
pub struct TwistedStep {
    pub k: usize,
    /// Slot filled from the twisted proposal.
    pub slot: usize,
    pub states: Vec<DVector<f64>>,
    /// Indices into the previous step's particles; empty at `k = 0`.
    pub ancestors: Vec<usize>,
    pub log_w: Vec<f64>,
    pub log_psi: Vec<f64>,
    /// `log Ṽ_kⁱ` used to resample into step `k + 1`; empty at the last step.
    pub log_v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TwistedRunRecord {
    /// Twisted estimates `log Z̃_k`.
    pub log_z_twist: Vec<f64>,
    /// Standard estimates `log Z_k` accumulated from the same particles.
    pub log_z_plain: Vec<f64>,
    /// Correction factors `log φ_k` with `log Z̃_k = log Z_k + Σ_{s≤k} log φ_s`.
    pub log_phi: Vec<f64>,
    pub steps: Option<Vec<TwistedStep>>,
}

impl TwistedRunRecord {
    pub fn final_log_z(&self) -> f64 {
        *self.log_z_twist.last().expect("at least one step")
    }

    /// Largest deviation from `log Z̃_k = log Z_k + Σ_{s≤k} log φ_s`.
    pub fn correction_residual(&self) -> f64 {
        let mut acc = 0.0;
        let mut worst = 0.0f64;
        for ((zt, z), phi) in self.log_z_twist.iter().zip(&self.log_z_plain).zip(&self.log_phi) {
            acc += phi;
            worst = worst.max((zt - z - acc).abs());
        }
        worst
    }
}

/// Per-step correction factors of a completed run.
pub fn correction_factors(record: &TwistedRunRecord) -> &[f64] {
    &record.log_phi
}

/// Runs the twisted particle filter with `n` particles.
#[allow(clippy::too_many_arguments)]
pub fn tpf_run<M, T, R>(
    model: &M,
    twisting: &T,
    proposal: ProposalKind,
    resampler: Resampler,
    data: &Dataset,
    n: usize,
    rng: &mut R,
    keep_steps: bool,
) -> Result<TwistedRunRecord>
where
    M: GaussianSsm + ?Sized,
    T: Twisting<M> + ?Sized,
    R: RngCore,
{
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one particle".into()));
    }
    data.validate(model)?;
    let ln_n = (n as f64).ln();
    let y0 = &data.observations[0];
    let q0 = initial_proposal(proposal, model, y0)?;
    let init = twisting.initial(model, data)?;
    let slot = rng.random_range(0..n);
    let mut states: Vec<DVector<f64>> = (0..n)
        .map(|i| if i == slot { init.sample(rng) } else { q0.sample(rng) })
        .collect();
    let ratio0 = |x: &DVector<f64>| match proposal {
        ProposalKind::Bootstrap => 0.0,
        ProposalKind::Ekf => model.initial().logpdf(x) - q0.logpdf(x),
    };
    let mut log_w = Vec::with_capacity(n);
    let mut log_psi = Vec::with_capacity(n);
    for x in &states {
        let r = ratio0(x);
        log_w.push(log_likelihood(model, 0, y0, x) + r);
        log_psi.push(init.log_phi(x) + r);
    }
    let mut lse_w = checked_lse(&log_w, 0)?;
    let lse_psi = checked_lse(&log_psi, 0)?;
    let mut log_z_twist = init.log_integral() + lse_w - lse_psi;
    let mut log_z_plain = lse_w - ln_n;
    let mut rec = TwistedRunRecord {
        log_z_twist: vec![log_z_twist],
        log_z_plain: vec![log_z_plain],
        log_phi: vec![init.log_integral() - (lse_psi - ln_n)],
        steps: keep_steps.then(Vec::new),
    };
    if let Some(steps) = rec.steps.as_mut() {
        steps.push(TwistedStep {
            k: 0,
            slot,
            states: states.clone(),
            ancestors: Vec::new(),
            log_w: log_w.clone(),
            log_psi: log_psi.clone(),
            log_v: Vec::new(),
        });
    }
    for (k, y) in data.observations.iter().enumerate().skip(1) {
        let twist = twisting.step(model, data, k, &states)?;
        let log_v: Vec<f64> = (0..n).map(|i| twist.log_v(i)).collect();
        let lse_wt = checked_lse(&twisted_log_weights(&log_w, &log_v), k - 1)?;
        let draw = twisted_draw(resampler, &log_w, &log_v, rng)?;
        let mut next = Vec::with_capacity(n);
        let mut next_w = Vec::with_capacity(n);
        let mut next_psi = Vec::with_capacity(n);
        for (i, &a) in draw.ancestors.iter().enumerate() {
            let prev = &states[a];
            let q = particle_proposal(proposal, model, k, prev, y)?;
            let x = if i == draw.slot { twist.sample(a, rng) } else { q.sample(rng) };
            let r = q.log_ratio(model, k, prev, &x);
            next_w.push(log_likelihood(model, k, y, &x) + r);
            next_psi.push(twist.log_phi(a, &x) + r);
            next.push(x);
        }
        if let Some(steps) = rec.steps.as_mut() {
            steps.last_mut().expect("previous step").log_v = log_v;
        }
        let lse_w_next = checked_lse(&next_w, k)?;
        let lse_psi = checked_lse(&next_psi, k)?;
        log_z_twist += lse_w_next - lse_w + lse_wt - lse_psi;
        log_z_plain += lse_w_next - ln_n;
        rec.log_z_twist.push(log_z_twist);
        rec.log_z_plain.push(log_z_plain);
        rec.log_phi.push(lse_wt - lse_w - (lse_psi - ln_n));
        states = next;
        log_w = next_w;
        lse_w = lse_w_next;
        if let Some(steps) = rec.steps.as_mut() {
            steps.push(TwistedStep {
                k,
                slot: draw.slot,
                states: states.clone(),
                ancestors: draw.ancestors,
                log_w: log_w.clone(),
                log_psi: next_psi,
                log_v: Vec::new(),
            });
        }
    }
    debug_assert!(
        rec.correction_residual() <= 1e-9 * (1.0 + rec.final_log_z().abs()),
        "correction identity violated by {}",
        rec.correction_residual()
    );
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{range_bearing_model, simulate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multinomial_constant_twist_and_single_particle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = twisted_multinomial_draw(&[0.0], &[3.0], &mut rng).unwrap();
        assert_eq!((d.slot, d.selected, d.ancestors.clone()), (0, 0, vec![0]));
        let d = twisted_systematic_draw(&[0.0], &[3.0], &mut rng).unwrap();
        assert_eq!((d.slot, d.selected, d.ancestors), (0, 0, vec![0]));
    }

    #[test]
    fn degenerate_twisted_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lw = [0.0, 0.0];
        let lv = [f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(matches!(twisted_multinomial_draw(&lw, &lv, &mut rng), Err(Error::DegenerateWeights)));
        assert!(matches!(twisted_systematic_draw(&lw, &lv, &mut rng), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn systematic_overlaps_partition_each_slot() {
        let lw: Vec<f64> = [0.1f64, 0.5, 0.05, 0.35].iter().map(|w| w.ln()).collect();
        let d = cumulative(&lw).unwrap();
        let ov = systematic_overlaps(&d);
        for s in 0..4 {
            let total: f64 = ov.iter().filter(|o| o.0 == s).map(|o| o.3 - o.2).sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
        for j in 0..4 {
            let total: f64 = ov.iter().filter(|o| o.1 == j).map(|o| o.3 - o.2).sum();
            assert!((total - 4.0 * lw[j].exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn systematic_equal_weights_select_by_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lv = [0.0, 1.0, -1.0];
        let reps = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..reps {
            let d = twisted_systematic_draw(&[0.0; 3], &lv, &mut rng).unwrap();
            assert_eq!(d.slot, d.selected);
            assert_eq!(d.ancestors, vec![0, 1, 2]);
            counts[d.slot] += 1;
        }
        let z: f64 = lv.iter().map(|v: &f64| v.exp()).sum();
        for s in 0..3 {
            let p = lv[s].exp() / z;
            let se = (p * (1.0 - p) / reps as f64).sqrt();
            assert!((counts[s] as f64 / reps as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn slot_gets_selected_ancestor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100_000 {
            let n = rng.random_range(1..9);
            let lw: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..0.0)).collect();
            let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            for r in [Resampler::Multinomial, Resampler::Systematic] {
                let d = twisted_draw(r, &lw, &lv, &mut rng).unwrap();
                assert_eq!(d.ancestors[d.slot], d.selected);
            }
        }
    }

    #[test]
    fn unit_twist_matches_standard_estimate_pathwise() {
        let model = range_bearing_model(0.1, 25.0, 1e-3, 1.0).unwrap();
        let data = simulate(&model, 30, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tw = ExponentialTwisting::new(TwistScheme::Unit, 0);
        for r in [Resampler::Multinomial, Resampler::Systematic] {
            let rec = tpf_run(&model, &tw, ProposalKind::Bootstrap, r, &data, 50, &mut ChaCha8Rng::seed_from_u64(4), false).unwrap();
            for (a, b) in rec.log_z_twist.iter().zip(&rec.log_z_plain) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(rec.log_phi.iter().all(|p| p.abs() < 1e-12));
        }
    }

    #[test]
    fn lookahead_window_is_truncated() {
        let model = range_bearing_model(0.1, 25.0, 1e-3, 1.0).unwrap();
        let data = simulate(&model, 5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let tw = ExponentialTwisting::new(TwistScheme::Local, 10);
        assert_eq!(tw.window(&data, 0).len(), 6);
        assert_eq!(tw.window(&data, 4).len(), 2);
        assert_eq!(tw.window(&data, 5).len(), 1);
        let prev = vec![DVector::from_vec(vec![100.0, 100.0, 0.5, 0.5])];
        let step = Twisting::<_>::step(&tw, &model, &data, 4, &prev).unwrap();
        let explicit = crate::twist::twist_local(&model, 4, &prev[0], &data.observations[4..=5], true).unwrap();
        assert!((step.log_phi(0, &prev[0]) - explicit.log_phi(&prev[0])).abs() < 1e-12);
    }

    #[test]
    fn full_lookahead_local_twist_is_exact_on_linear_model() {
        use crate::kalman::kf_loglik;
        use crate::ssm::linear_gaussian_model;
        use nalgebra::{dmatrix, dvector};
        let model = linear_gaussian_model(
            dmatrix![0.9, 0.2; -0.1, 0.8],
            dmatrix![0.3, 0.05; 0.05, 0.2],
            dmatrix![1.0, -0.5],
            dmatrix![0.4],
            dvector![0.5, -0.2],
            dmatrix![1.0, 0.3; 0.3, 0.8],
        )
        .unwrap();
        let data = simulate(&model, 12, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let exact = kf_loglik(&model, &data).unwrap();
        let tw = ExponentialTwisting::new(TwistScheme::Local, 12);
        for r in [Resampler::Multinomial, Resampler::Systematic] {
            for seed in 0..5 {
                let rec = tpf_run(&model, &tw, ProposalKind::Bootstrap, r, &data, 8, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
                assert!((rec.final_log_z() - exact).abs() < 1e-8, "{} vs {}", rec.final_log_z(), exact);
            }
        }
    }
}
