//! Declarative experiment configs.
//!
//! A config file is a JSON object. Only `strategy`, `rounds`, `seed` and
//! `partition.dirichlet_alpha` are required; everything else falls back to
//! the defaults of [`ExperimentConfig::default`]. Client counts are given
//! once at the top level and copied into the partition, the class count is
//! copied into the model, and the partition seed follows `seed` unless set.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sage_core::data::AugmentConfig;
use sage_core::federation::{ConfigIssue, ExperimentConfig, Strategy};
use sage_core::model::Activation;

pub const REQUIRED_FIELDS: [&str; 4] = ["strategy", "rounds", "seed", "partition.dirichlet_alpha"];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub strategy: Option<String>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub num_clients: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub local_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub mu_u: Option<f64>,
    pub batch_size_s: Option<usize>,
    pub batch_size_u: Option<usize>,
    pub oracle_filter: Option<bool>,
    pub entropy_bins: Option<usize>,
    #[serde(default)]
    pub correction: RawCorrection,
    #[serde(default)]
    pub partition: RawPartition,
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub task: RawTask,
    #[serde(default)]
    pub augment: RawAugment,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCorrection {
    pub tau: Option<f64>,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPartition {
    pub dirichlet_alpha: Option<f64>,
    pub label_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub classes: Option<usize>,
    pub samples_per_class: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub input_dim: Option<usize>,
    pub hidden_dims: Option<Vec<usize>>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTask {
    pub class_separation: Option<f64>,
    pub noise_scale: Option<f64>,
    pub test_samples_per_class: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAugment {
    pub weak_sigma: Option<f64>,
    pub strong_sigma: Option<f64>,
    pub drop_prob: Option<f64>,
}

/// Everything wrong with a config, one located issue per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigReport {
    pub issues: Vec<ConfigIssue>,
}

impl ConfigReport {
    fn single(path: &str, message: impl Into<String>) -> Self {
        ConfigReport {
            issues: vec![ConfigIssue {
                path: path.to_string(),
                message: message.into(),
            }],
        }
    }

    pub fn paths(&self) -> Vec<&str> {
        self.issues.iter().map(|i| i.path.as_str()).collect()
    }
}

impl fmt::Display for ConfigReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigReport {}

/// Parse and check config text, filling defaults.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, ConfigReport> {
    validate_value(parse_text(text)?)
}

/// Parse config text into JSON; blank text is an empty object.
pub fn parse_text(text: &str) -> Result<Value, ConfigReport> {
    if text.trim().is_empty() {
        return Ok(Value::Object(Default::default()));
    }
    serde_json::from_str(text).map_err(|e| ConfigReport::single("<root>", e.to_string()))
}

/// Same as [`validate_config`] for an already parsed JSON value.
pub fn validate_value(value: Value) -> Result<ExperimentConfig, ConfigReport> {
    if !value.is_object() {
        return Err(ConfigReport::single("<root>", "expected a JSON object"));
    }
    let raw: RawConfig =
        serde_json::from_value(value).map_err(|e| ConfigReport::single("<root>", e.to_string()))?;
    resolve(&raw)
}

fn missing(raw: &RawConfig) -> ConfigReport {
    let present = [
        raw.strategy.is_some(),
        raw.rounds.is_some(),
        raw.seed.is_some(),
        raw.partition.dirichlet_alpha.is_some(),
    ];
    ConfigReport {
        issues: REQUIRED_FIELDS
            .iter()
            .zip(present)
            .filter(|(_, ok)| !ok)
            .map(|(path, _)| ConfigIssue {
                path: path.to_string(),
                message: "required field is missing".to_string(),
            })
            .collect(),
    }
}

pub fn resolve(raw: &RawConfig) -> Result<ExperimentConfig, ConfigReport> {
    let mut report = missing(raw);
    let strategy = match raw.strategy.as_deref().map(str::parse::<Strategy>) {
        Some(Ok(s)) => s,
        Some(Err(_)) => {
            let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
            report.issues.push(ConfigIssue {
                path: "strategy".to_string(),
                message: format!("unknown strategy, expected one of {}", names.join(", ")),
            });
            Strategy::Sage
        }
        None => Strategy::Sage,
    };
    if !report.issues.is_empty() {
        return Err(report);
    }

    let mut cfg = ExperimentConfig::default();
    let seed = raw.seed.unwrap_or(cfg.seed);
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg.rounds = raw.rounds.unwrap_or(cfg.rounds);
    cfg.num_clients = raw.num_clients.unwrap_or(cfg.num_clients);
    cfg.clients_per_round = raw.clients_per_round.unwrap_or(cfg.clients_per_round);
    cfg.local_epochs = raw.local_epochs.unwrap_or(cfg.local_epochs);
    cfg.learning_rate = raw.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.mu_u = raw.mu_u.unwrap_or(cfg.mu_u);
    cfg.batch_size_s = raw.batch_size_s.unwrap_or(cfg.batch_size_s);
    cfg.batch_size_u = raw.batch_size_u.unwrap_or(cfg.batch_size_u);
    cfg.oracle_filter = raw.oracle_filter.unwrap_or(cfg.oracle_filter);
    cfg.entropy_bins = raw.entropy_bins.unwrap_or(cfg.entropy_bins);

    cfg.correction.tau = raw.correction.tau.unwrap_or(cfg.correction.tau);
    cfg.correction.kappa = raw.correction.kappa.unwrap_or(cfg.correction.kappa);

    let p = &raw.partition;
    cfg.partition.num_clients = cfg.num_clients;
    cfg.partition.dirichlet_alpha = p.dirichlet_alpha.unwrap_or(cfg.partition.dirichlet_alpha);
    cfg.partition.label_fraction = p.label_fraction.unwrap_or(cfg.partition.label_fraction);
    cfg.partition.seed = p.seed.unwrap_or(seed);
    cfg.partition.classes = p.classes.unwrap_or(cfg.partition.classes);
    cfg.partition.samples_per_class = p
        .samples_per_class
        .unwrap_or(cfg.partition.samples_per_class);

    cfg.model.num_classes = cfg.partition.classes;
    cfg.model.input_dim = raw.model.input_dim.unwrap_or(cfg.model.input_dim);
    if let Some(h) = &raw.model.hidden_dims {
        cfg.model.hidden_dims = h.clone();
    }
    cfg.model.activation = raw.model.activation.unwrap_or(cfg.model.activation);

    cfg.task.class_separation = raw
        .task
        .class_separation
        .unwrap_or(cfg.task.class_separation);
    cfg.task.noise_scale = raw.task.noise_scale.unwrap_or(cfg.task.noise_scale);
    cfg.task.test_samples_per_class = raw
        .task
        .test_samples_per_class
        .unwrap_or(cfg.task.test_samples_per_class);

    let scaled = AugmentConfig::for_scale(cfg.task.noise_scale);
    cfg.augment = AugmentConfig {
        weak_sigma: raw.augment.weak_sigma.unwrap_or(scaled.weak_sigma),
        strong_sigma: raw.augment.strong_sigma.unwrap_or(scaled.strong_sigma),
        drop_prob: raw.augment.drop_prob.unwrap_or(scaled.drop_prob),
    };

    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigReport { issues })
    }
}

/// Overwrite the value at a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigReport> {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        if key.is_empty() {
            return Err(ConfigReport::single(path, "empty path segment"));
        }
        let Some(obj) = node.as_object_mut() else {
            return Err(ConfigReport::single(
                path,
                "path crosses a non-object value",
            ));
        };
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(ConfigReport::single(path, "empty path"))
}
