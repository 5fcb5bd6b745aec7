use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vitkd_cli::commands::{cmd_adapt, cmd_explain, cmd_report, cmd_train};
use vitkd_cli::config::{read_job, AdaptJob, ExplainJob, ReportJob, TrainJob};
use vitkd_cli::CliResult;

/// Knowledge-distillation toolkit for small vision transformers: train,
/// adapt across domains without source data, explain, report.
#[derive(Parser)]
#[command(name = "vitkd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised fine-tuning; writes checkpoints, history and summaries.
    Train(CommonArgs),
    /// Source-free adaptation of a trained student to a target domain.
    Adapt(CommonArgs),
    /// Grad-CAM heatmaps and DFF concept maps from a checkpoint.
    Explain(CommonArgs),
    /// Aggregate run directories into tables and plots.
    Report(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the JSON job configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let job: TrainJob = read_job(&args.config)?;
            let base = config_base(&args.config);
            cmd_train(&job, &base, &args.out, args.seed)?;
        }
        Command::Adapt(args) => {
            let job: AdaptJob = read_job(&args.config)?;
            let base = config_base(&args.config);
            cmd_adapt(&job, &base, &args.out, args.seed)?;
        }
        Command::Explain(args) => {
            let job: ExplainJob = read_job(&args.config)?;
            let base = config_base(&args.config);
            cmd_explain(&job, &base, &args.out, args.seed)?;
        }
        Command::Report(args) => {
            let job: ReportJob = read_job(&args.config)?;
            let base = config_base(&args.config);
            cmd_report(&job, &base, &args.out)?;
        }
    }
    Ok(())
}

/// Relative paths inside a config resolve against the config's directory.
fn config_base(config: &std::path::Path) -> PathBuf {
    config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
