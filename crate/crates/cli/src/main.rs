use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qmri::eval::{emit_figures, evaluate_results, reconstruct, simulate, CellFailure, ExperimentConfig, Method};

/// Simulate undersampled quantitative MRI data, reconstruct parameter maps,
/// and score them.
#[derive(Parser)]
#[command(name = "qmri", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom, coils, masks and k-space.
    Simulate(Common),
    /// Reconstruct maps for every configured method and acceleration.
    Recon(Common),
    /// Score reconstructions and write metrics.csv.
    Eval(Common),
    /// Render one figure per map from a scored result directory.
    Figures(Common),
    /// simulate, recon, eval and figures in sequence.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one method (lorein, zero_filled, lrt_admm).
    #[arg(long)]
    method: Option<Method>,
    /// Restrict to one acceleration factor.
    #[arg(long = "R")]
    r: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(m) = self.method {
            if !cfg.methods.contains(&m) {
                cfg.methods = vec![m];
            }
        }
        if let Some(r) = self.r {
            if !cfg.mask.r.contains(&r) {
                bail!("R={r} is not among the configured factors {:?}", cfg.mask.r);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(failures: &[CellFailure]) -> ExitCode {
    for f in failures {
        eprintln!("failed: {} at R={}: {}", f.method, f.r, f.message);
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match std::env::var("LOREIN_DEVICE") {
        Ok(dev) if !dev.eq_ignore_ascii_case("cpu") => log::warn!("device `{dev}` is not available; running on the CPU"),
        _ => {}
    }
    Ok(match cli.command {
        Command::Simulate(c) => {
            simulate(&c.config()?)?;
            ExitCode::SUCCESS
        }
        Command::Recon(c) => report(&reconstruct(&c.config()?, c.method, c.r)?),
        Command::Eval(c) => {
            let rep = evaluate_results(&c.config()?)?;
            print!("{}", rep.table.to_csv());
            report(&rep.failures)
        }
        Command::Figures(c) => {
            for path in emit_figures(&c.config()?.output_dir)? {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Command::All(c) => {
            let cfg = c.config()?;
            simulate(&cfg)?;
            let mut failures = reconstruct(&cfg, c.method, c.r)?;
            let rep = evaluate_results(&cfg)?;
            print!("{}", rep.table.to_csv());
            for f in rep.failures {
                if !failures.iter().any(|e| e.method == f.method && e.r == f.r) && c.method.is_none_or(|m| m == f.method) && c.r.is_none_or(|r| r == f.r) {
                    failures.push(f);
                }
            }
            if !rep.table.rows.is_empty() {
                emit_figures(&cfg.output_dir)?;
            }
            report(&failures)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
