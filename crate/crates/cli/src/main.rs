use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twisted_smc_cli::commands::{cmd_pmmh, cmd_simulate, cmd_track, cmd_varz};
use twisted_smc_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "tsmc", version, about = "Standard and twisted particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate datasets from the configured model.
    Simulate(Common),
    /// Variance of log-likelihood estimates over a filter grid.
    Varz(Common),
    /// Particle marginal Metropolis-Hastings.
    Pmmh(Common),
    /// EKF tracking error and consistency at fixed parameters.
    Track(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Simulate(c) | Command::Varz(c) | Command::Pmmh(c) | Command::Track(c)) = &cli.command;
    let cfg = RunConfig::load(&c.config)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    match &cli.command {
        Command::Simulate(_) => {
            for p in cmd_simulate(&cfg, seed, &c.out)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Varz(_) => {
            let rows = cmd_varz(&cfg, seed, &c.out)?;
            log::info!("wrote {} rows", rows.len());
        }
        Command::Pmmh(_) => {
            let chain = cmd_pmmh(&cfg, seed, &c.out)?;
            log::info!("acceptance {:?}, mean {:?}", chain.acceptance_rates(), chain.mean());
        }
        Command::Track(_) => {
            let (rmse, consistency) = cmd_track(&cfg, seed, &c.out)?;
            log::info!("rmse {rmse:.4}, consistency {consistency:.3}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
