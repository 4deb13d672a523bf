use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lss_cli::config::{parse_config, parse_config_str, parse_override};
use lss_cli::run::{cmd_run, threads_from_env};
use lss_cli::sweep::{cmd_sweep, parse_axis};
use lss_core::analysis::{
    bound_terms, lr_terms, max_local_steps, FirstTerm, Report, TheoryParams,
};
use lss_core::model::evaluate;
use lss_core::params::load_checkpoint;
use lss_core::Error;

#[derive(Parser)]
#[command(name = "lss", version, about = "Federated learning simulator with Local Superior Soups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv, diagnostics.txt, final.lssw and config.toml.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. `--set local.lambda_a=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a cartesian grid of experiments, one subdirectory per cell.
    Sweep {
        config: PathBuf,
        /// Swept key and values, e.g. `--grid local.tau=1,4,8`. Repeatable.
        #[arg(long = "grid", value_name = "KEY=V1,V2,...", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split rebuilt from a config.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the step size, convergence bound and local-step ceiling.
    Bound {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        zeta: f64,
        #[arg(long, default_value_t = 0.0)]
        c: f64,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        clients: f64,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        rounds: f64,
        /// Total gradient computations; defaults to clients * tau * rounds.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long, value_enum, default_value_t = FirstTermArg::AsPrinted)]
        first_term: FirstTermArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FirstTermArg {
    AsPrinted,
    DistanceSquared,
}

fn overrides(raw: &[String]) -> Result<Vec<(String, toml::Value)>> {
    raw.iter().map(|s| parse_override(s)).collect()
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, overrides: raw } => {
            let cfg = parse_config(&config, &overrides(&raw)?)?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir")?;
            let art = cmd_run(&cfg, &dir, threads_from_env()?)?;
            println!("final_test_accuracy: {}", art.final_accuracy);
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axes, out, overrides: raw } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let base = overrides(&raw)?;
            // fail fast on a config that cannot work for any cell
            let cfg = parse_config_str(&text, &base)?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir")?;
            let axes = axes.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>>>()?;
            let res = cmd_sweep(&text, &base, &axes, &dir, threads_from_env()?)?;
            println!("{} cells, {} failed; summary in {}", res.cells, res.failures, dir.display());
            Ok(if res.failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Eval { checkpoint, config, overrides: raw } => {
            let cfg = parse_config(&config, &overrides(&raw)?)?;
            let data = cfg.experiment().prepare_data()?;
            let (params, shape) = load_checkpoint(&checkpoint)?;
            if shape != data.spec.shape() {
                bail!("checkpoint architecture does not match the config's model");
            }
            let (loss, acc) = evaluate(&params, &data.spec, &data.test.batch())?;
            let mut r = Report::new();
            r.push("test_accuracy", acc).push("test_loss", loss);
            print!("{}", r.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bound { beta, sigma, zeta, c, d, clients, tau, rounds, k, first_term } => {
            let p = TheoryParams { beta, sigma, zeta, c, d, clients, tau, rounds, total_steps: k };
            let first = match first_term {
                FirstTermArg::AsPrinted => FirstTerm::AsPrinted,
                FirstTermArg::DistanceSquared => FirstTerm::DistanceSquared,
            };
            let mut r = Report::new();
            let lr = lr_terms(&p)?;
            for (i, t) in lr.iter().enumerate() {
                r.push(format!("lr_term_{}", i + 1), t);
            }
            r.push("lr", lr.iter().copied().fold(f64::INFINITY, f64::min));
            let b = bound_terms(&p, first)?;
            for (i, t) in b.iter().enumerate() {
                r.push(format!("bound_term_{}", i + 1), t);
            }
            r.push("bound", b.iter().sum::<f64>());
            match max_local_steps(&p) {
                Ok(v) => r.push("max_local_steps", v),
                Err(Error::Unbounded) => r.push("max_local_steps", "unbounded"),
                Err(e) => return Err(e.into()),
            };
            print!("{}", r.render());
            Ok(ExitCode::SUCCESS)
        }
    }
}
