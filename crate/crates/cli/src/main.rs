use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualmargin_cli::config::{keys_help, parse_config, ExperimentConfig, ReportFormat};
use dualmargin_cli::error::CliError;
use dualmargin_cli::run::{self, Grid};

#[derive(Parser)]
#[command(name = "dualmargin", version, about = "Dual-margin long-tailed open-set experiments")]
#[command(after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI-style config file; `section.key = value` lines and `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides output.format (csv, json or both).
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate(Common),
    /// Train one model and evaluate it on the test split.
    Train(Common),
    /// Re-evaluate a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to model.json in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Gradient checks and probe sweeps.
    Verify(Common),
    /// Run a grid of training runs in parallel.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// seeds, margin, lambda or components.
        #[arg(long, default_value = "components")]
        grid: Grid,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(None, format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|m| CliError::config(None, m))?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(format) = common.format {
        cfg.format = format;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(common) => run::cmd_generate(&load(&common)?),
        Command::Train(common) => {
            let result = run::cmd_train(&load(&common)?)?;
            println!("{}", dualmargin::eval::metrics_csv(&[result.row]).trim_end());
            Ok(())
        }
        Command::Eval { common, model } => {
            let row = run::cmd_eval(&load(&common)?, model.as_deref())?;
            println!("{}", dualmargin::eval::metrics_csv(&[row]).trim_end());
            Ok(())
        }
        Command::Verify(common) => {
            let report = run::cmd_verify(&load(&common)?)?;
            print!("{}", dualmargin::verify::verify_csv(&report.rows));
            if report.all_pass() {
                Ok(())
            } else {
                let failed: Vec<_> = report
                    .rows
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| r.check.as_str())
                    .collect();
                Err(CliError::Check(failed.join(", ")))
            }
        }
        Command::Ablate { common, grid } => {
            let results = run::cmd_ablate(grid, &load(&common)?)?;
            let rows: Vec<_> = results.into_iter().map(|r| r.row).collect();
            print!("{}", dualmargin::eval::metrics_csv(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
