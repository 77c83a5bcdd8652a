use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ldp_cli::{
    parse_and_validate, parse_values, render_cost_report, run_cost_report, run_eval, run_replay,
    run_sweep, run_train, with_output_dir,
};
use ldp_core::harness::train::RunArtifacts;

/// Quantization-aware training with learnable per-layer precision.
#[derive(Debug, Parser)]
#[command(name = "ldp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX directory or JSON data spec; defaults to the checkpoint's own
        /// test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate every quantized layer at this width instead of the
        /// learned bits.
        #[arg(long)]
        bits: Option<u32>,
    },
    /// Train once per value of a numeric config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted config path, e.g. precision.t_frac.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain with bits forced from a recorded schedule log.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// schedule.csv from an earlier run.
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer BitOPs, the static cost and the learned-precision target.
    CostReport {
        #[arg(long)]
        config: PathBuf,
        /// Directory for cost_report.json; defaults to train.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const LOG_LEVELS: [&str; 4] = ["error", "warn", "info", "debug"];

fn init_logging() -> anyhow::Result<()> {
    let level = std::env::var("LDP_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    if !LOG_LEVELS.contains(&level.as_str()) {
        bail!(
            "LDP_LOG_LEVEL must be one of {}, got `{level}`",
            LOG_LEVELS.join(", ")
        );
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn print_artifacts(a: &RunArtifacts) {
    for p in a.paths() {
        println!("{}", p.display());
    }
}

fn load(config: &Path, out: Option<&Path>) -> anyhow::Result<ldp_core::harness::config::RunConfig> {
    Ok(with_output_dir(parse_and_validate(config)?, out))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load(&config, out.as_deref())?;
            print_artifacts(&run_train(&cfg)?);
        }
        Command::Eval {
            checkpoint,
            data,
            bits,
        } => {
            let report = run_eval(&checkpoint, data.as_deref(), bits)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let values = parse_values(&values)?;
            let cfg = load(&config, out.as_deref())?;
            let outcome = run_sweep(&cfg, &param, &values)?;
            for a in &outcome.runs {
                print_artifacts(a);
            }
            println!("{}", outcome.summary_path.display());
        }
        Command::Replay {
            config,
            schedule,
            out,
        } => {
            let cfg = load(&config, out.as_deref())?;
            print_artifacts(&run_replay(&cfg, &schedule)?);
        }
        Command::CostReport { config, out } => {
            let cfg = parse_and_validate(&config)?;
            let dir = out.unwrap_or_else(|| cfg.train.output_dir.clone());
            let (report, path) = run_cost_report(&cfg, &dir)?;
            print!("{}", render_cost_report(&report));
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
