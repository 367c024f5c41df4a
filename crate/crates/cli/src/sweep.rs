//! Grids of runs over config paths, repeated with derived seeds.
//!
//! A sweep file looks like
//!
//! ```json
//! {
//!   "base": { "strategy": "lpl", "rounds": 100, "seed": 0,
//!             "partition": { "dirichlet_alpha": 0.5 } },
//!   "axes": { "strategy": ["lpl", "sage"],
//!             "partition.dirichlet_alpha": [0.1, 0.5, 1.0] },
//!   "repeats": 3,
//!   "threshold": 0.8
//! }
//! ```
//!
//! Axes are expanded in sorted path order. Repeat 0 keeps the cell's seed
//! and later repeats derive theirs from it, so cells that differ only in
//! strategy share data partitions repeat by repeat.
//!
//! `combined.csv` has one row per run:
//!
//! | column | meaning |
//! |---|---|
//! | `cell` | axis assignments, `path=value` joined by `;` |
//! | `strategy`, `alpha`, `repeat`, `seed` | resolved run identity |
//! | `final_accuracy` | test accuracy after the last round |
//! | `rounds_to_threshold` | first round with accuracy ≥ `threshold`, or `None` |
//! | `speedup` | reference rounds over this run's rounds, or `None` |
//! | `cell_mean_final_accuracy`, `cell_std_final_accuracy` | over the cell's repeats |
//! | `run_dir` | run directory relative to the sweep output |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sage_core::federation::{ExperimentConfig, Strategy};
use sage_core::metrics::{mean_std, rounds_to_threshold};
use sage_core::seed::{derive, tag};

use crate::config::{set_path, validate_value};
use crate::error::{CliError, CliResult};
use crate::run::{prepare_dir, run_to_dir};

pub const COMBINED_FILE: &str = "combined.csv";
pub const NONE_SENTINEL: &str = "None";
pub const DEFAULT_MAX_RUNS: usize = 512;

fn default_repeats() -> usize {
    1
}

fn default_reference() -> String {
    Strategy::Lpl.name().to_string()
}

fn default_max_runs() -> usize {
    DEFAULT_MAX_RUNS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: Value,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub threshold: f64,
    #[serde(default = "default_reference")]
    pub reference_strategy: String,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
}

/// One planned run of a sweep.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub cell: usize,
    pub cell_label: String,
    pub repeat: usize,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedRow {
    pub cell: String,
    pub strategy: Strategy,
    pub alpha: f64,
    pub repeat: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub rounds_to_threshold: Option<usize>,
    pub speedup: Option<f64>,
    pub cell_mean_final_accuracy: f64,
    pub cell_std_final_accuracy: f64,
    pub run_dir: PathBuf,
}

pub fn parse_sweep(text: &str) -> CliResult<SweepSpec> {
    let spec: SweepSpec = serde_json::from_str(text).map_err(|e| CliError::Sweep(e.to_string()))?;
    if spec.repeats == 0 {
        return Err(CliError::Sweep("repeats must be >= 1".into()));
    }
    if spec.reference_strategy.parse::<Strategy>().is_err() {
        return Err(CliError::Sweep(format!(
            "unknown reference_strategy {:?}",
            spec.reference_strategy
        )));
    }
    if let Some((path, _)) = spec.axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(CliError::Sweep(format!("axis {path} has no values")));
    }
    Ok(spec)
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dir_name(cell: usize, label: &str) -> String {
    let clean: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '=') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean.is_empty() {
        format!("cell{cell:03}")
    } else {
        format!("cell{cell:03}_{clean}")
    }
}

/// Expand a sweep into validated run configs without running anything.
pub fn plan(spec: &SweepSpec, out_dir: &Path) -> CliResult<Vec<PlannedRun>> {
    let cells: usize = spec.axes.values().map(Vec::len).product();
    let total = cells.saturating_mul(spec.repeats);
    if total > spec.max_runs {
        return Err(CliError::Sweep(format!(
            "{total} runs exceed max_runs = {}",
            spec.max_runs
        )));
    }

    let axes: Vec<(&String, &Vec<Value>)> = spec.axes.iter().collect();
    let mut runs = Vec::with_capacity(total);
    for cell in 0..cells {
        let mut value = spec.base.clone();
        let mut labels = Vec::with_capacity(axes.len());
        let mut rest = cell;
        // Last axis varies fastest.
        let mut picks = vec![0; axes.len()];
        for (i, (_, values)) in axes.iter().enumerate().rev() {
            picks[i] = rest % values.len();
            rest /= values.len();
        }
        for ((path, values), &pick) in axes.iter().zip(&picks) {
            set_path(&mut value, path, values[pick].clone())?;
            labels.push(format!("{path}={}", value_label(&values[pick])));
        }
        let cell_label = labels.join(";");
        let cell_cfg = validate_value(value.clone())?;
        for repeat in 0..spec.repeats {
            let mut v = value.clone();
            if repeat > 0 {
                let seed = derive(cell_cfg.seed, &[tag::REPEAT, repeat as u64]);
                set_path(&mut v, "seed", Value::from(seed))?;
            }
            let config = validate_value(v)?;
            let dir = out_dir
                .join(dir_name(cell, &cell_label))
                .join(format!("rep{repeat}"));
            runs.push(PlannedRun {
                cell,
                cell_label: cell_label.clone(),
                repeat,
                dir,
                config,
            });
        }
    }
    Ok(runs)
}

/// Run a sweep, writing every run directory and `combined.csv`.
pub fn sweep_to_dir(spec: &SweepSpec, out_dir: &Path) -> CliResult<Vec<CombinedRow>> {
    let runs = plan(spec, out_dir)?;
    prepare_dir(out_dir)?;
    log::info!("sweep: {} runs", runs.len());
    let finals: Vec<(f64, Option<usize>)> = runs
        .par_iter()
        .map(|run| {
            let outcome = run_to_dir(&run.config, &run.dir)?;
            Ok((
                outcome.final_accuracy(),
                rounds_to_threshold(&outcome.trace, spec.threshold),
            ))
        })
        .collect::<CliResult<_>>()?;
    let rows = combine(spec, out_dir, &runs, &finals);
    write_combined(&out_dir.join(COMBINED_FILE), &rows)?;
    Ok(rows)
}

/// Key identifying a run's comparison group: every axis except strategy.
fn reference_key(run: &PlannedRun) -> String {
    run.cell_label
        .split(';')
        .filter(|part| !part.starts_with("strategy="))
        .collect::<Vec<_>>()
        .join(";")
}

fn combine(
    spec: &SweepSpec,
    out_dir: &Path,
    runs: &[PlannedRun],
    finals: &[(f64, Option<usize>)],
) -> Vec<CombinedRow> {
    let reference: Strategy = spec
        .reference_strategy
        .parse()
        .expect("checked when parsing the sweep");
    let mut by_cell: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (run, (acc, _)) in runs.iter().zip(finals) {
        by_cell.entry(run.cell).or_default().push(*acc);
    }
    let mut reference_rounds: BTreeMap<(String, usize), Option<usize>> = BTreeMap::new();
    for (run, (_, rounds)) in runs.iter().zip(finals) {
        if run.config.strategy == reference {
            reference_rounds.insert((reference_key(run), run.repeat), *rounds);
        }
    }

    runs.iter()
        .zip(finals)
        .map(|(run, &(acc, rounds))| {
            let (mean, std) = mean_std(&by_cell[&run.cell]).expect("cell has runs");
            let reference = reference_rounds
                .get(&(reference_key(run), run.repeat))
                .copied()
                .flatten();
            let speedup = match (reference, rounds) {
                (Some(r), Some(own)) => Some(r as f64 / own as f64),
                _ => None,
            };
            CombinedRow {
                cell: run.cell_label.clone(),
                strategy: run.config.strategy,
                alpha: run.config.partition.dirichlet_alpha,
                repeat: run.repeat,
                seed: run.config.seed,
                final_accuracy: acc,
                rounds_to_threshold: rounds,
                speedup,
                cell_mean_final_accuracy: mean,
                cell_std_final_accuracy: std,
                run_dir: run
                    .dir
                    .strip_prefix(out_dir)
                    .unwrap_or(&run.dir)
                    .to_path_buf(),
            }
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| NONE_SENTINEL.to_string(), |x| x.to_string())
}

pub fn write_combined(path: &Path, rows: &[CombinedRow]) -> CliResult<()> {
    let to_err = |e: csv::Error| CliError::Sweep(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record([
        "cell",
        "strategy",
        "alpha",
        "repeat",
        "seed",
        "final_accuracy",
        "rounds_to_threshold",
        "speedup",
        "cell_mean_final_accuracy",
        "cell_std_final_accuracy",
        "run_dir",
    ])
    .map_err(to_err)?;
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.strategy.to_string(),
            r.alpha.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.final_accuracy.to_string(),
            opt(r.rounds_to_threshold),
            opt(r.speedup),
            r.cell_mean_final_accuracy.to_string(),
            r.cell_std_final_accuracy.to_string(),
            r.run_dir.display().to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn spec(axes: Value, repeats: usize) -> SweepSpec {
        serde_json::from_value(json!({
            "base": {"strategy": "lpl", "rounds": 2, "seed": 7,
                     "partition": {"dirichlet_alpha": 1.0}},
            "axes": axes,
            "repeats": repeats,
            "threshold": 0.5
        }))
        .unwrap()
    }

    #[test]
    fn plan_expands_the_cross_product() {
        let s = spec(
            json!({"strategy": ["lpl", "sage"], "partition.dirichlet_alpha": [0.1, 1.0]}),
            2,
        );
        let runs = plan(&s, Path::new("out")).unwrap();
        assert_eq!(runs.len(), 8);
        let cells: Vec<_> = runs.iter().map(|r| r.cell_label.as_str()).collect();
        assert_eq!(cells[0], "partition.dirichlet_alpha=0.1;strategy=lpl");
        assert_eq!(cells[2], "partition.dirichlet_alpha=0.1;strategy=sage");
        assert_eq!(runs[0].config.seed, 7);
        assert_ne!(runs[1].config.seed, 7);
        // Strategy cells of the same repeat share seeds.
        assert_eq!(runs[1].config.seed, runs[3].config.seed);
        assert_eq!(runs[1].config.partition.seed, runs[1].config.seed);
    }

    #[test]
    fn plan_respects_the_run_cap() {
        let mut s = spec(json!({"strategy": ["lpl", "sage", "gpl"]}), 3);
        s.max_runs = 8;
        assert!(matches!(
            plan(&s, Path::new("out")),
            Err(CliError::Sweep(_))
        ));
    }

    #[test]
    fn plan_reports_invalid_cells() {
        let s = spec(json!({"clients_per_round": [30]}), 1);
        match plan(&s, Path::new("out")) {
            Err(CliError::Config(report)) => assert_eq!(report.paths(), vec!["clients_per_round"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn speedup_is_relative_to_the_reference_strategy() {
        let s = spec(json!({"strategy": ["lpl", "sage"]}), 1);
        let runs = plan(&s, Path::new("out")).unwrap();
        let rows = combine(
            &s,
            Path::new("out"),
            &runs,
            &[(0.6, Some(10)), (0.7, Some(4))],
        );
        assert_eq!(rows[0].speedup, Some(1.0));
        assert_eq!(rows[1].speedup, Some(2.5));
        let rows = combine(&s, Path::new("out"), &runs, &[(0.6, None), (0.7, Some(4))]);
        assert_eq!(rows[0].rounds_to_threshold, None);
        assert_eq!(rows[1].speedup, None);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(parse_sweep(r#"{"base": {}, "threshold": 0.5, "repeats": 0}"#).is_err());
        assert!(
            parse_sweep(r#"{"base": {}, "threshold": 0.5, "reference_strategy": "x"}"#).is_err()
        );
        assert!(parse_sweep(r#"{"base": {}, "threshold": 0.5, "axes": {"rounds": []}}"#).is_err());
        assert!(parse_sweep(r#"{"base": {}}"#).is_err());
    }
}
