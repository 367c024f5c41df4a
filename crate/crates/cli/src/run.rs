//! Single runs and the files they leave behind.
//!
//! An output directory holds `trace.csv`, `summary.json` and
//! `manifest.json`. Only the manifest carries a timestamp, so two runs of
//! the same config produce byte-identical traces and summaries.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sage_core::data::export_shards;
use sage_core::federation::{run_experiment, ExperimentConfig, ExperimentOutcome, Simulation};
use sage_core::report::{trace_csv_string, ExperimentSummary, TRACE_SCHEMA_VERSION};

use crate::error::{CliError, CliResult};

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SHARDS_FILE: &str = "shards.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub trace_schema_version: u32,
    pub created_unix: u64,
}

/// SHA-256 over the canonical JSON form of a resolved config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

impl Manifest {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        Manifest {
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            trace_schema_version: TRACE_SCHEMA_VERSION,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: PathBuf, contents: &[u8]) -> CliResult<()> {
    fs::write(&path, contents).map_err(|e| CliError::io(path, e))
}

pub fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Run one experiment and write its artifacts into `out_dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<ExperimentOutcome> {
    cfg.validate()?;
    prepare_dir(out_dir)?;
    // Fail on an unwritable directory before spending time on training.
    let manifest = Manifest::for_config(cfg);
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(out_dir.join(MANIFEST_FILE), manifest_json.as_bytes())?;

    log::info!(
        "running {} alpha={} seed={} rounds={}",
        cfg.strategy,
        cfg.partition.dirichlet_alpha,
        cfg.seed,
        cfg.rounds
    );
    let outcome = run_experiment(cfg)?;
    write(
        out_dir.join(TRACE_FILE),
        trace_csv_string(&outcome.trace)?.as_bytes(),
    )?;
    let summary = ExperimentSummary::new(cfg, &outcome.trace);
    write(out_dir.join(SUMMARY_FILE), summary.to_json()?.as_bytes())?;
    log::info!(
        "finished {}: final accuracy {:.4}",
        out_dir.display(),
        outcome.final_accuracy()
    );
    Ok(outcome)
}

/// Write the client shards of a config as JSON lines.
pub fn export_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    prepare_dir(out_dir)?;
    let sim = Simulation::new(cfg.clone())?;
    let mut buf = Vec::new();
    export_shards(sim.shards(), &mut buf)?;
    let path = out_dir.join(SHARDS_FILE);
    write(path.clone(), &buf)?;
    Ok(path)
}
