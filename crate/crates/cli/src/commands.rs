//! The `simulate`, `varz`, `pmmh` and `track` subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use twisted_smc::diag::{autocorr, ess, track_metrics, var_log_z, write_autocorr_csv, write_metrics_csv};
use twisted_smc::filters::{derive_seed, estimate_log_z, FilterSpec};
use twisted_smc::kalman::{ekf_loglik, ekf_run, kf_loglik};
use twisted_smc::pmcmc::{pmmh, Chain};
use twisted_smc::ssm::{Dataset, ModelFamily};

use crate::config::{DynModel, Estimator, RunConfig};
use crate::error::CliError;

const VARZ_STREAM: u64 = 1 << 32;
const PMMH_STREAM: u64 = 2 << 32;

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

/// Writes `datasets` simulated datasets and returns their paths.
pub fn cmd_simulate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    (0..cfg.datasets)
        .map(|i| {
            let data = cfg.simulate(seed, i as u64)?;
            let name = format!("{}_{i:03}.csv", cfg.output.dataset_prefix);
            data.write_csv(create(out, &name)?)?;
            Ok(out.join(name))
        })
        .collect()
}

/// One row of the variance benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct VarzRow {
    pub spec: FilterSpec,
    pub var_log_z: f64,
    pub mean_runtime_s: Option<f64>,
}

/// Runs every grid cell of `[varz]` on one dataset and writes the table.
pub fn cmd_varz(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<VarzRow>, CliError> {
    let grid = cfg.varz.as_ref().ok_or_else(|| CliError::Config("missing [varz] section".into()))?;
    let data = cfg.dataset(seed)?;
    let model = cfg.build(&cfg.theta_truth(), cfg.visibility_for(&data, seed).as_deref())?;
    data.validate(&model)?;

    let mut cells = Vec::new();
    for &kind in &grid.filters {
        for &resampling in &grid.resampling {
            for &n in &grid.n {
                let ls: &[usize] = if kind.twist_scheme().is_some() { &grid.l } else { &[0] };
                for &l in ls {
                    cells.push(FilterSpec {
                        relinearize: cfg.filter.relinearize,
                        ..FilterSpec::new(kind, resampling, n, l)
                    });
                }
            }
        }
    }

    let rows: Vec<VarzRow> = cells
        .iter()
        .enumerate()
        .map(|(c, spec)| {
            let cell_seed = derive_seed(seed, VARZ_STREAM + c as u64);
            let runs: Vec<_> = (0..grid.replicates as u64)
                .into_par_iter()
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cell_seed, r));
                    let start = Instant::now();
                    let est = estimate_log_z(spec, &model, &data, &mut rng);
                    (est, start.elapsed().as_secs_f64())
                })
                .collect();
            let mut est = Vec::with_capacity(runs.len());
            let mut failed = None;
            for (r, _) in &runs {
                match r {
                    Ok(v) => est.push(*v),
                    Err(e) => failed = Some(e.clone()),
                }
            }
            let var = match failed {
                Some(e) => {
                    log::warn!("cell {} {} n={} l={}: {e}", spec.kind, spec.resampling.name(), spec.n, spec.lookahead);
                    f64::NAN
                }
                None => var_log_z(&est).unwrap_or(f64::NAN),
            };
            let mean_runtime = runs.iter().map(|(_, t)| t).sum::<f64>() / runs.len() as f64;
            VarzRow {
                spec: *spec,
                var_log_z: var,
                mean_runtime_s: grid.timing.then_some(mean_runtime),
            }
        })
        .collect();

    let mut w = csv::Writer::from_writer(create(out, &cfg.output.varz)?);
    w.write_record(["filter", "resampling", "n", "l", "var_logz", "mean_runtime_s"])
        .map_err(csv_err)?;
    for row in &rows {
        w.write_record([
            row.spec.kind.id().to_string(),
            row.spec.resampling.name().to_string(),
            row.spec.n.to_string(),
            row.spec.lookahead.to_string(),
            row.var_log_z.to_string(),
            row.mean_runtime_s.map(|t| t.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Library(twisted_smc::Error::Dataset(e.to_string()))
}

/// Parameter family induced by a run configuration.
struct ConfigFamily<'a> {
    cfg: &'a RunConfig,
    visibility: Option<Vec<Vec<usize>>>,
}

impl ModelFamily for ConfigFamily<'_> {
    type Model = DynModel;

    fn names(&self) -> Vec<String> {
        self.cfg.theta_names()
    }

    fn build(&self, theta: &[f64]) -> twisted_smc::Result<DynModel> {
        self.cfg.build(theta, self.visibility.as_deref()).map_err(|e| match e {
            CliError::Library(e) => e,
            other => twisted_smc::Error::InvalidParameter(other.to_string()),
        })
    }
}

/// Runs PMMH and writes the chain, summary metrics and per-parameter
/// autocorrelations.
pub fn cmd_pmmh(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Chain, CliError> {
    let pm = cfg.pmmh.as_ref().ok_or_else(|| CliError::Config("missing [pmmh] section".into()))?;
    let prior = cfg.prior()?;
    let mh = cfg.mh_config()?;
    let data = cfg.dataset(seed)?;
    let family = ConfigFamily {
        cfg,
        visibility: cfg.visibility_for(&data, seed),
    };
    let spec = cfg.filter.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PMMH_STREAM));
    let chain = pmmh(
        &family,
        |m: &DynModel, d: &Dataset, rng: &mut ChaCha8Rng| match pm.estimator {
            Estimator::Filter => estimate_log_z(&spec, m, d, rng),
            Estimator::Kalman => kf_loglik(m, d),
            Estimator::Ekf => ekf_loglik(m, d),
        },
        &prior,
        &mh,
        &data,
        pm.theta0.clone(),
        &mut rng,
    )?;
    chain.write_csv(create(out, &cfg.output.chain)?)?;

    let mut rows: Vec<(String, f64)> = chain
        .acceptance_rates()
        .iter()
        .enumerate()
        .map(|(b, a)| (format!("acceptance_b{}", b + 1), *a))
        .collect();
    rows.push(("failures".into(), chain.failures as f64));
    let mean = chain.mean();
    let mut esses = Vec::new();
    for (j, name) in chain.names.iter().enumerate() {
        rows.push((format!("mean_{name}"), mean[j]));
        let trace = chain.trace(j);
        if trace.len() < 2 {
            continue;
        }
        match ess(&trace) {
            Ok(e) => {
                rows.push((format!("ess_{name}"), e));
                esses.push(e);
            }
            Err(e) => log::warn!("no ESS for {name}: {e}"),
        }
        match autocorr(&trace, pm.max_lag.min(trace.len() - 1)) {
            Ok(ac) => write_autocorr_csv(&ac, create(out, &format!("{}_{name}.csv", cfg.output.autocorr_prefix))?)?,
            Err(e) => log::warn!("no autocorrelation for {name}: {e}"),
        }
    }
    if !esses.is_empty() && esses.len() == chain.names.len() {
        rows.push(("mean_ess".into(), esses.iter().sum::<f64>() / esses.len() as f64));
    }
    write_metrics_csv(&rows, create(out, &cfg.output.metrics)?)?;
    Ok(chain)
}

/// Post-burn-in parameter means of a chain CSV.
pub fn chain_mean(path: &Path, burn_in: usize) -> Result<Vec<f64>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let first = header
        .iter()
        .position(|h| h != "iter" && h != "logZ" && !h.starts_with("acc_b"))
        .ok_or_else(|| CliError::Config("chain file has no parameter columns".into()))?;
    let d = header.len() - first;
    let mut sums = vec![0.0; d];
    let mut count = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if i < burn_in {
            continue;
        }
        for (j, s) in sums.iter_mut().enumerate() {
            let f = rec.get(first + j).unwrap_or("");
            *s += f
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("chain row {i}: cannot parse `{f}`")))?;
        }
        count += 1;
    }
    if count == 0 {
        return Err(CliError::Config("chain has no rows after burn-in".into()));
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Runs the EKF at fixed parameters and scores it against the true states.
pub fn cmd_track(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(f64, f64), CliError> {
    let data = cfg.dataset(seed)?;
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| CliError::Library(twisted_smc::Error::Dataset("dataset has no truth columns".into())))?;
    let theta = match &cfg.track {
        Some(t) => match (&t.theta, &t.chain) {
            (Some(theta), _) => theta.clone(),
            (None, Some(chain)) => chain_mean(chain, t.burn_in)?,
            (None, None) => cfg.theta_truth(),
        },
        None => cfg.theta_truth(),
    };
    let model = cfg.build(&theta, cfg.visibility_for(&data, seed).as_deref())?;
    let states = ekf_run(&model, &data)?;
    let means: Vec<_> = states.iter().map(|s| s.mean.clone()).collect();
    let covs: Vec<_> = states.iter().map(|s| s.cov.clone()).collect();
    let m = track_metrics(&means, &covs, truth)?;
    write_metrics_csv(
        &[("rmse".into(), m.rmse), ("consistency".into(), m.consistency)],
        create(out, &cfg.output.metrics)?,
    )?;
    Ok((m.rmse, m.consistency))
}
