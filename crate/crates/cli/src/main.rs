use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "lti-mogp", version, about = "Fit and evaluate LTI treatment-response models with MOGP random effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads for per-patient work.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic cohort and its ground truth.
    Simulate,
    /// Fit the model; writes params.txt and elbo_trace.csv.
    Fit,
    /// Forecast held-out observations; writes predictions.csv.
    Predict,
    /// Prediction and recovery metrics; writes metrics.csv (and qq_*.csv).
    Evaluate,
    /// Dense-grid decomposition of each fitted trajectory.
    Decompose,
    /// Finite-difference check of the analytic ELBO gradient.
    Gradcheck,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Model(e.into()))?;
    let work = || match cli.command {
        Command::Simulate => commands::simulate(&cfg, &cli.out),
        Command::Fit => commands::fit(&cfg, &cli.out),
        Command::Predict => commands::predict(&cfg, &cli.out),
        Command::Evaluate => commands::evaluate(&cfg, &cli.out),
        Command::Decompose => commands::decompose(&cfg, &cli.out),
        Command::Gradcheck => commands::gradcheck(&cfg),
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
