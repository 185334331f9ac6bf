//! `wflow <task> --config <path> [--seed N] [--out DIR]`
//!
//! Exit status: 0 success, 1 i/o failure, 2 config error, 3 numeric failure.

mod config;
mod error;
mod output;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::json;

use config::{ExperimentConfig, Task};
use error::CliError;
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "wflow", version, about = "Train, evaluate and sample flow models from a TOML config")]
struct Args {
    task: Task,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: &Args) -> Result<PathBuf, CliError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let cfg = ExperimentConfig::load(&args.config)?.resolve(args.task, args.seed)?;
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("wflow-{}", cfg.task())));
    let mut out = OutputDir::create(&dir)?;
    let summary = tasks::run(&cfg, &mut out)?;
    let report = json!({
        "task": cfg.task(),
        "seed": cfg.seed,
        "config": cfg,
        "metrics": summary.metrics,
        "series": summary.series,
        "artifacts": summary.artifacts,
    });
    out.write("report.json", serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    out.write("config.toml", cfg.echo_toml())?;
    let since_epoch = started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let timing = json!({
        "started_unix_s": since_epoch,
        "elapsed_s": clock.elapsed().as_secs_f64(),
        "block_wall_ms": summary.block_wall_ms,
    });
    out.write("timing.json", serde_json::to_string_pretty(&timing).expect("json") + "\n")?;
    out.commit();
    Ok(dir)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&args) {
        Ok(dir) => {
            println!("{}: artifacts in {}", args.task, dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("wflow {}: {e}", args.task);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
