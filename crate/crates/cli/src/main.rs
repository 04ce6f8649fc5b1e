use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ghicast::{exit_code, report, Pipeline, PipelineConfig, Stage};
use log::error;

#[derive(Parser)]
#[command(name = "ghicast", version, about = "Probabilistic hourly GHI forecasting pipeline")]
struct Cli {
    /// JSON pipeline config (or a run manifest to replay).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, clean and split the data.
    Ingest,
    /// Run every variable-selection method and evaluate it.
    Select,
    /// Fit the individual models.
    Fit,
    /// Rolling-origin forecasts over the test window.
    Forecast,
    /// Combine base forecasts.
    Combine,
    /// Score individual and combined forecasts.
    Score,
    /// Murphy diagrams.
    Murphy,
    /// The whole pipeline followed by the report.
    Run,
    /// Summarize an existing output directory.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => match PipelineConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                error!("config {}: {e}", p.display());
                return ExitCode::from(exit_code(&e) as u8);
            }
        },
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    let last = match cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Select => Stage::Select,
        Command::Fit => Stage::Fit,
        Command::Forecast => Stage::Forecast,
        Command::Combine => Stage::Combine,
        Command::Score => Stage::Score,
        Command::Murphy | Command::Run => Stage::Murphy,
        Command::Report => {
            return match report::write_summary(&cfg.output_dir, &cfg) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => {
                    error!("report: {e}");
                    ExitCode::from(exit_code(&e) as u8)
                }
            };
        }
    };
    let pipeline = Pipeline::new(cfg);
    if let Err(e) = pipeline.run_until(last) {
        error!("{e}");
        return ExitCode::from(exit_code(&e.source) as u8);
    }
    if matches!(cli.command, Command::Run) {
        if let Err(e) = report::write_summary(&pipeline.out, &pipeline.cfg) {
            error!("report: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    }
    ExitCode::SUCCESS
}
