//! Persisted forms of a metric trace.
//!
//! Trace CSV columns (schema version [`TRACE_SCHEMA_VERSION`]):
//!
//! | column | meaning |
//! |---|---|
//! | `round` | 1-based round index |
//! | `test_acc` | global-model accuracy on the held-out set after aggregation |
//! | `pl_count` | pseudo-labels issued during the round |
//! | `pl_acc` | fraction of issued pseudo-labels matching the hidden label |
//! | `mean_lambda` | mean correction coefficient of corrected-soft labels |
//! | `mean_entropy_local` | entropy of the local-model confidence histogram |
//! | `mean_entropy_global` | entropy of the global-model confidence histogram |
//! | `corrected_count`, `local_hard_count`, `global_hard_count`, `abstain_count` | decisions by kind |
//! | `lambda_majority`, `lambda_minority` | mean coefficient on local majority / minority classes |
//!
//! Undefined values are written as empty cells.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::ExperimentConfig;
use crate::metrics::{mean_defined, RoundMetrics};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub test_acc: f64,
    pub pl_count: usize,
    pub pl_acc: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub mean_entropy_local: Option<f64>,
    pub mean_entropy_global: Option<f64>,
    pub corrected_count: usize,
    pub local_hard_count: usize,
    pub global_hard_count: usize,
    pub abstain_count: usize,
    pub lambda_majority: Option<f64>,
    pub lambda_minority: Option<f64>,
}

impl From<&RoundMetrics> for TraceRow {
    fn from(m: &RoundMetrics) -> Self {
        TraceRow {
            round: m.round,
            test_acc: m.test_accuracy,
            pl_count: m.pseudo_count,
            pl_acc: m.pseudo_accuracy,
            mean_lambda: m.mean_lambda,
            mean_entropy_local: m.entropy_local,
            mean_entropy_global: m.entropy_global,
            corrected_count: m.corrected_count,
            local_hard_count: m.local_hard_count,
            global_hard_count: m.global_hard_count,
            abstain_count: m.abstain_count,
            lambda_majority: m.lambda_majority,
            lambda_minority: m.lambda_minority,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_trace_csv<W: Write>(trace: &[RoundMetrics], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for m in trace {
        writer.serialize(TraceRow::from(m)).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn trace_csv_string(trace: &[RoundMetrics]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

pub fn read_trace_csv<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<TraceRow>, _>>()
        .map_err(csv_err)
}

/// Run-level summary written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub strategy: String,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub mean_pseudo_accuracy: Option<f64>,
    pub mean_entropy_local: Option<f64>,
    pub mean_entropy_global: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub config: ExperimentConfig,
    pub trace: Vec<RoundMetrics>,
}

impl ExperimentSummary {
    pub fn new(cfg: &ExperimentConfig, trace: &[RoundMetrics]) -> Self {
        ExperimentSummary {
            schema_version: TRACE_SCHEMA_VERSION,
            strategy: cfg.strategy.to_string(),
            dirichlet_alpha: cfg.partition.dirichlet_alpha,
            seed: cfg.seed,
            rounds: trace.len(),
            final_accuracy: trace.last().map_or(0.0, |m| m.test_accuracy),
            best_accuracy: trace.iter().map(|m| m.test_accuracy).fold(0.0, f64::max),
            mean_pseudo_accuracy: mean_defined(trace.iter().map(|m| m.pseudo_accuracy)),
            mean_entropy_local: mean_defined(trace.iter().map(|m| m.entropy_local)),
            mean_entropy_global: mean_defined(trace.iter().map(|m| m.entropy_global)),
            mean_lambda: mean_defined(trace.iter().map(|m| m.mean_lambda)),
            config: cfg.clone(),
            trace: trace.to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}
