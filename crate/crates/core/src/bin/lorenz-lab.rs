use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lorenz_lab::harness::{self, ExperimentConfig, WORKERS_ENV};
use lorenz_lab::Result;

#[derive(Parser)]
#[command(name = "lorenz-lab", version, about = "Geometric Lorenz model experiments")]
struct Cli {
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config value.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Recompute the summary of a finished run from its CSV tables.
    Report { dir: PathBuf },
    /// Build an empirical measure and write its snapshot.
    SnapshotMeasure {
        config: PathBuf,
        /// Snapshot path; defaults to `<output>/measure.snapshot`.
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

fn load(path: &Path, cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate { config } => {
            let cfg = load(config, cli)?;
            cfg.validate()?;
            println!("ok: {} ({})", config.display(), cfg.experiment.name());
        }
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            let workers = harness::workers_from_env()?;
            let rep = harness::with_workers(workers, || harness::run(&cfg))??;
            rep.write(&cfg.output)?;
            println!("{}", serde_json::to_string_pretty(&rep.summary)?);
        }
        Command::Report { dir } => {
            let rep = harness::report(dir)?;
            rep.write(dir)?;
            println!("{}", serde_json::to_string_pretty(&rep.summary)?);
        }
        Command::SnapshotMeasure { config, to } => {
            let cfg = load(config, cli)?;
            let path = to.clone().unwrap_or_else(|| cfg.output.join("measure.snapshot"));
            let workers = harness::workers_from_env()?;
            let m = harness::with_workers(workers, || harness::snapshot_measure(&cfg, &path))??;
            println!("wrote {} ({} points, params {})", path.display(), m.total(), m.params_hash());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, lorenz_lab::LabError::Config(_)) && std::env::var(WORKERS_ENV).is_ok() {
                eprintln!("note: {WORKERS_ENV} is set");
            }
            ExitCode::FAILURE
        }
    }
}
