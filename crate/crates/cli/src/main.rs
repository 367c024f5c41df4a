use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use sage_cli::config::{parse_text, set_path, validate_value};
use sage_cli::error::CliResult;
use sage_cli::run::{export_to_dir, read_text, run_to_dir};
use sage_cli::sweep::{parse_sweep, sweep_to_dir, COMBINED_FILE};
use sage_core::federation::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "sage",
    version,
    about = "Federated semi-supervised learning simulator"
)]
struct Cli {
    /// Log filter, e.g. warn, info or debug.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a config and print it with defaults filled in.
    Validate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of experiments described by a sweep file.
    Sweep {
        sweep: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Replace the base config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the client shards of a config as JSON lines.
    ExportShards {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut value = parse_text(&read_text(path)?)?;
    if let Some(seed) = seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    Ok(validate_value(value)?)
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Validate { config, seed } => {
            let cfg = load_config(&config, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&cfg).expect("config serializes")
            );
        }
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let outcome = run_to_dir(&cfg, &out)?;
            println!("final accuracy {:.4}", outcome.final_accuracy());
        }
        Command::Sweep { sweep, out, seed } => {
            let mut spec = parse_sweep(&read_text(&sweep)?)?;
            if let Some(seed) = seed {
                set_path(&mut spec.base, "seed", Value::from(seed))?;
            }
            let rows = sweep_to_dir(&spec, &out)?;
            println!(
                "{} runs, see {}",
                rows.len(),
                out.join(COMBINED_FILE).display()
            );
        }
        Command::ExportShards { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let path = export_to_dir(&cfg, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
