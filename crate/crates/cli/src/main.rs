//! `rareopt run <config.toml>` and `rareopt compare <a.csv> <b.csv>`.

mod compare;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numeric(#[from] rareopt::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::ShapeMismatch(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) | CliError::Csv(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "rareopt", version, about = "Rare-event probability optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Worker threads (all cores when omitted).
        #[arg(long)]
        jobs: Option<usize>,
        /// Replace the config's seeds with this one.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `[output] dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two result CSVs cell by cell.
    Compare { a: PathBuf, b: PathBuf },
}

fn run(config: PathBuf, jobs: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let source = std::fs::read_to_string(&config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = RunConfig::parse(&source)?;
    if let Some(s) = seed {
        if let Some(sim) = cfg.simulation.as_mut() {
            sim.seeds = vec![s];
        }
    }
    if jobs == Some(0) {
        return Err(CliError::Config("--jobs must be positive".into()));
    }
    let hash = cfg.hash();
    let prepared = cfg.prepare(&source)?;
    let out_dir = out
        .or_else(|| prepared.config.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&prepared.config.experiment));
    std::fs::create_dir_all(&out_dir)?;

    let outcome = run::execute(&prepared, jobs, &out_dir).map_err(|e| match e {
        CliError::Numeric(err) => CliError::Numeric(rareopt::Error::NumericFailure(format!(
            "experiment `{}` ({}): {err}",
            prepared.config.experiment,
            prepared.config.kind_label()
        ))),
        other => other,
    })?;
    let record = run::write_record(&prepared, &hash, &outcome, jobs, &out_dir)?;
    if let Some(budget) = prepared.config.budget_seconds {
        if outcome.seconds > budget {
            log::warn!("run took {:.1} s, over its {budget} s budget", outcome.seconds);
        }
    }
    for (path, rows) in &outcome.files {
        println!("wrote {} ({rows} rows)", path.display());
    }
    println!("record {} (config {hash}, {:.1} s)", record.display(), outcome.seconds);
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf) -> Result<(), CliError> {
    let cells = compare::compare(&a, &b)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["row", "column", "a", "b", "diff", "z"])?;
    for c in &cells {
        w.write_record([
            c.row.to_string(),
            c.column.clone(),
            c.a.to_string(),
            c.b.to_string(),
            c.diff.to_string(),
            c.z.map(|z| z.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let z: Vec<f64> = cells.iter().filter_map(|c| c.z).filter(|z| z.is_finite()).collect();
    if !z.is_empty() {
        let within = z.iter().filter(|z| z.abs() < 3.0).count();
        let max = z.iter().fold(0.0f64, |m, z| m.max(z.abs()));
        eprintln!("{within}/{} z-scores below 3 in magnitude, max |z| = {max:.3}", z.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, jobs, seed, out } => run(config, jobs, seed, out),
        Command::Compare { a, b } => compare(a, b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
