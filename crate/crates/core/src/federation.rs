//! Simulated federated training: client sampling, local semi-supervised
//! updates against a frozen copy of the global model, and size-weighted
//! aggregation.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    dirichlet_partition, strong_augment, weak_augment, AugmentConfig, ClientShard, Dataset,
    PartitionConfig, SyntheticTask, TaskSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{majority_classes, ClientDiagnostics, ClientMetrics, RoundMetrics};
use crate::model::{
    self, forward, init_params, sgd_step, supervised_loss_grad, unsupervised_loss_grad, Activation,
    ModelSpec, ParameterVector,
};
use crate::pseudo::{strategy_assign, CorrectionConfig, PseudoMode};
use crate::seed::{self, tag};

/// Training recipe run by every client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Labeled data only (FedAvg).
    SupervisedOnly,
    /// Every label revealed (FedAvg-SL upper bound).
    SupervisedUpperBound,
    Lpl,
    Gpl,
    Cpg,
    Sage,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::SupervisedOnly,
        Strategy::SupervisedUpperBound,
        Strategy::Lpl,
        Strategy::Gpl,
        Strategy::Cpg,
        Strategy::Sage,
    ];

    pub fn pseudo_mode(self) -> Option<PseudoMode> {
        match self {
            Strategy::SupervisedOnly | Strategy::SupervisedUpperBound => None,
            Strategy::Lpl => Some(PseudoMode::Lpl),
            Strategy::Gpl => Some(PseudoMode::Gpl),
            Strategy::Cpg => Some(PseudoMode::Cpg),
            Strategy::Sage => Some(PseudoMode::Sage),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SupervisedOnly => "supervised_only",
            Strategy::SupervisedUpperBound => "supervised_upper_bound",
            Strategy::Lpl => "lpl",
            Strategy::Gpl => "gpl",
            Strategy::Cpg => "cpg",
            Strategy::Sage => "sage",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == lower)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// Shape of the synthetic task beyond what the partition and model fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub class_separation: f64,
    pub noise_scale: f64,
    pub test_samples_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub mu_u: f64,
    pub correction: CorrectionConfig,
    pub strategy: Strategy,
    pub batch_size_s: usize,
    pub batch_size_u: usize,
    pub partition: PartitionConfig,
    pub model: ModelSpec,
    pub task: SyntheticConfig,
    pub augment: AugmentConfig,
    /// Drop every pseudo-label that disagrees with the hidden label.
    /// Diagnostic only; it reads ground truth inside training.
    pub oracle_filter: bool,
    pub entropy_bins: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let classes = 10;
        let input_dim = 16;
        let noise_scale = 1.0;
        ExperimentConfig {
            num_clients: 20,
            clients_per_round: 8,
            rounds: 100,
            local_epochs: 5,
            learning_rate: 0.1,
            mu_u: 1.0,
            correction: CorrectionConfig::default(),
            strategy: Strategy::Sage,
            batch_size_s: 16,
            batch_size_u: 64,
            partition: PartitionConfig {
                num_clients: 20,
                dirichlet_alpha: 0.5,
                label_fraction: 0.1,
                seed: 0,
                classes,
                samples_per_class: 300,
            },
            model: ModelSpec {
                input_dim,
                hidden_dims: vec![32],
                num_classes: classes,
                activation: Activation::Tanh,
            },
            task: SyntheticConfig {
                class_separation: 2.5,
                noise_scale,
                test_samples_per_class: 100,
            },
            augment: AugmentConfig::for_scale(noise_scale),
            oracle_filter: false,
            entropy_bins: crate::metrics::DEFAULT_ENTROPY_BINS,
            seed: 0,
        }
    }
}

/// One violated constraint, located by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ExperimentConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            classes: self.partition.classes,
            input_dim: self.model.input_dim,
            samples_per_class: self.partition.samples_per_class,
            class_separation: self.task.class_separation,
            noise_scale: self.task.noise_scale,
        }
    }

    /// Every constraint violation, empty when the config is valid.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut check = |ok: bool, path: &str, message: &str| {
            if !ok {
                out.push(ConfigIssue {
                    path: path.to_string(),
                    message: message.to_string(),
                });
            }
        };
        check(self.num_clients >= 1, "num_clients", "must be >= 1");
        check(
            self.clients_per_round >= 1 && self.clients_per_round <= self.num_clients,
            "clients_per_round",
            "must satisfy 1 <= clients_per_round <= num_clients",
        );
        check(self.rounds >= 1, "rounds", "must be >= 1");
        check(self.local_epochs >= 1, "local_epochs", "must be >= 1");
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be > 0",
        );
        check(
            self.mu_u >= 0.0 && self.mu_u.is_finite(),
            "mu_u",
            "must be >= 0",
        );
        check(
            self.correction.tau > 0.0 && self.correction.tau < 1.0,
            "correction.tau",
            "must lie in (0, 1)",
        );
        check(
            self.correction.kappa >= 0.0,
            "correction.kappa",
            "must be >= 0",
        );
        check(self.batch_size_s >= 1, "batch_size_s", "must be >= 1");
        check(self.batch_size_u >= 1, "batch_size_u", "must be >= 1");
        check(
            self.partition.num_clients == self.num_clients,
            "partition.num_clients",
            "must equal num_clients",
        );
        check(
            self.partition.dirichlet_alpha > 0.0 && self.partition.dirichlet_alpha.is_finite(),
            "partition.dirichlet_alpha",
            "must be > 0",
        );
        check(
            self.partition.label_fraction > 0.0 && self.partition.label_fraction < 1.0,
            "partition.label_fraction",
            "must lie in (0, 1)",
        );
        check(
            self.partition.classes >= 2,
            "partition.classes",
            "must be >= 2",
        );
        check(
            self.partition.samples_per_class >= 1,
            "partition.samples_per_class",
            "must be >= 1",
        );
        check(
            self.model.num_classes == self.partition.classes,
            "model.num_classes",
            "must equal partition.classes",
        );
        check(self.model.input_dim >= 1, "model.input_dim", "must be >= 1");
        check(
            self.model.hidden_dims.iter().all(|&h| h >= 1),
            "model.hidden_dims",
            "every width must be >= 1",
        );
        check(
            self.task.class_separation >= 0.0 && self.task.class_separation.is_finite(),
            "task.class_separation",
            "must be finite and >= 0",
        );
        check(
            self.task.noise_scale >= 0.0 && self.task.noise_scale.is_finite(),
            "task.noise_scale",
            "must be finite and >= 0",
        );
        check(
            self.task.test_samples_per_class >= 1,
            "task.test_samples_per_class",
            "must be >= 1",
        );
        check(
            self.augment.weak_sigma >= 0.0,
            "augment.weak_sigma",
            "must be >= 0",
        );
        check(
            self.augment.strong_sigma >= 0.0,
            "augment.strong_sigma",
            "must be >= 0",
        );
        check(
            (0.0..=1.0).contains(&self.augment.drop_prob),
            "augment.drop_prob",
            "must lie in [0, 1]",
        );
        check(self.entropy_bins >= 2, "entropy_bins", "must be >= 2");
        let labeled_total = (self.partition.label_fraction
            * self.partition.samples_per_class as f64)
            .round() as usize
            * self.partition.classes;
        check(
            labeled_total >= self.num_clients,
            "partition.label_fraction",
            "too few labeled samples to give every client one",
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                issues
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }
}

/// Hooks for observing client updates in tests.
pub trait UpdateProbe: Sync {
    /// Called before every global-model prediction with the parameters used.
    fn global_forward(&self, _params: &ParameterVector) {}
    /// Called once per pseudo-label assignment.
    fn pseudo_assign(&self) {}
}

struct NoProbe;

impl UpdateProbe for NoProbe {}

/// `m` distinct client ids drawn uniformly without replacement, ascending.
pub fn select_clients<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > k {
        return Err(Error::TooManyClients {
            requested: m,
            available: k,
        });
    }
    let mut ids = index::sample(rng, k, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Aggregation weights proportional to total local dataset sizes.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    if total == 0 {
        return Err(Error::InvalidConfig("clients hold no data".into()));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Weighted mean of client parameters, weight `(n_s + n_u) / sum(n_s + n_u)`.
pub fn aggregate<'a>(
    updates: impl IntoIterator<Item = (&'a ParameterVector, usize, usize)>,
) -> Result<ParameterVector> {
    let updates: Vec<_> = updates.into_iter().collect();
    let Some(&(anchor, _, _)) = updates.first() else {
        return Err(Error::EmptyUpdates);
    };
    if updates.iter().any(|(p, _, _)| !p.same_layout(anchor)) {
        return Err(Error::LayoutMismatch);
    }
    let sizes: Vec<usize> = updates.iter().map(|&(_, s, u)| s + u).collect();
    let weights = aggregation_weights(&sizes)?;
    // Accumulate offsets from the first update so identical inputs are a
    // fixed point to the last bit.
    let mut out = anchor.clone();
    let base = anchor.values();
    for ((params, _, _), w) in updates.iter().zip(&weights).skip(1) {
        for ((o, p), b) in out.values_mut().iter_mut().zip(params.values()).zip(base) {
            *o += w * (p - b);
        }
    }
    Ok(out)
}

/// Shuffled index stream that reshuffles whenever it wraps around.
struct CyclingLoader {
    order: Vec<usize>,
    pos: usize,
}

impl CyclingLoader {
    fn new<R: Rng>(len: usize, rng: &mut R) -> Self {
        let mut loader = CyclingLoader {
            order: (0..len).collect(),
            pos: 0,
        };
        loader.reshuffle(rng);
        loader
    }

    fn reshuffle<R: Rng>(&mut self, rng: &mut R) {
        use rand::seq::SliceRandom;
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn next_batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle(rng);
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterVector,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub steps: usize,
    /// `None` for strategies that never touch the unlabeled pool.
    pub diagnostics: Option<ClientDiagnostics>,
}

/// Local training of one client starting from `global`.
///
/// Every step draws a labeled batch and, for pseudo-labeling strategies, an
/// unlabeled batch. Pseudo-labels come from the weak view scored by the
/// local model and by `global`, which stays fixed for the whole update; the
/// unsupervised loss is applied to the strong view and averaged over the
/// samples that received a label.
pub fn client_update(
    global: &ParameterVector,
    shard: &ClientShard,
    cfg: &ExperimentConfig,
    client_seed: u64,
) -> Result<ClientUpdate> {
    client_update_probed(global, shard, cfg, client_seed, &NoProbe)
}

pub fn client_update_probed(
    global: &ParameterVector,
    shard: &ClientShard,
    cfg: &ExperimentConfig,
    client_seed: u64,
    probe: &dyn UpdateProbe,
) -> Result<ClientUpdate> {
    let spec = &cfg.model;
    if *global.layout().as_ref() != spec.layout() {
        return Err(Error::LayoutMismatch);
    }
    let mut labeled_rng = seed::child_rng(client_seed, &[tag::LABELED]);
    let mut unlabeled_rng = seed::child_rng(client_seed, &[tag::UNLABELED]);

    let (supervised_pool, supervised_batch): (Vec<(&[f64], usize)>, usize) = match cfg.strategy {
        Strategy::SupervisedUpperBound => (
            shard
                .labeled
                .iter()
                .map(|s| (s.features.as_slice(), s.label))
                .chain(
                    shard
                        .unlabeled
                        .iter()
                        .filter(|u| !u.is_copy())
                        .map(|u| (u.features(), u.hidden_label())),
                )
                .collect(),
            cfg.batch_size_s + cfg.batch_size_u,
        ),
        _ => (
            shard
                .labeled
                .iter()
                .map(|s| (s.features.as_slice(), s.label))
                .collect(),
            cfg.batch_size_s,
        ),
    };
    if supervised_pool.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let num_unlabeled = shard.num_unlabeled();
    let steps_per_epoch = num_unlabeled.div_ceil(cfg.batch_size_u).max(1);
    let mut labeled_loader = CyclingLoader::new(supervised_pool.len(), &mut labeled_rng);
    let mut unlabeled_loader = CyclingLoader::new(num_unlabeled, &mut unlabeled_rng);

    let mode = cfg.strategy.pseudo_mode();
    let majority = match mode {
        Some(_) if num_unlabeled > 0 => {
            majority_classes(&shard.unlabeled_distribution(spec.num_classes)?)
        }
        _ => vec![true; spec.num_classes],
    };
    let mut diagnostics = mode.map(|_| ClientDiagnostics::new(spec.num_classes, cfg.entropy_bins));

    let mut local = global.clone();
    let mut steps = 0;
    for _epoch in 0..cfg.local_epochs {
        for _ in 0..steps_per_epoch {
            let batch: Vec<(&[f64], usize)> = labeled_loader
                .next_batch(supervised_batch, &mut labeled_rng)
                .into_iter()
                .map(|i| supervised_pool[i])
                .collect();
            let (_, mut grad) = supervised_loss_grad(&local, spec, &batch)?;

            if let (Some(mode), Some(diag)) = (mode, diagnostics.as_mut()) {
                let mut strong_views = Vec::new();
                let mut targets = Vec::new();
                for i in unlabeled_loader.next_batch(cfg.batch_size_u, &mut unlabeled_rng) {
                    let sample = &shard.unlabeled[i];
                    let weak = weak_augment(
                        sample.features(),
                        cfg.augment.weak_sigma,
                        &mut unlabeled_rng,
                    );
                    let p_l = forward(&local, spec, &weak)?;
                    probe.global_forward(global);
                    let p_g = forward(global, spec, &weak)?;
                    probe.pseudo_assign();
                    let mut decision = strategy_assign(mode, &p_l, &p_g, &cfg.correction)?;
                    let truth = sample.hidden_label();
                    if cfg.oracle_filter && decision.target_class().is_some_and(|c| c != truth) {
                        decision = decision.abstained();
                    }
                    diag.observe(&p_l, &p_g, &decision, truth, cfg.correction.tau, &majority);
                    if let Some(target) = decision.target {
                        strong_views.push(strong_augment(
                            sample.features(),
                            cfg.augment.strong_sigma,
                            cfg.augment.drop_prob,
                            &mut unlabeled_rng,
                        ));
                        targets.push(target);
                    }
                }
                if !targets.is_empty() {
                    let pairs: Vec<(&[f64], &[f64])> = strong_views
                        .iter()
                        .zip(&targets)
                        .map(|(x, t)| (x.as_slice(), t.mass()))
                        .collect();
                    let (_, unsup) = unsupervised_loss_grad(&local, spec, &pairs)?;
                    grad.add_scaled(&unsup, cfg.mu_u)?;
                }
            }

            local = sgd_step(&local, &grad, cfg.learning_rate)?;
            steps += 1;
        }
    }
    debug_assert!(local.is_finite());

    Ok(ClientUpdate {
        client_id: shard.client_id,
        params: local,
        num_labeled: shard.num_labeled(),
        num_unlabeled,
        steps,
        diagnostics,
    })
}

/// Fraction of `test` samples whose predicted class equals the label.
pub fn evaluate(params: &ParameterVector, spec: &ModelSpec, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyPool);
    }
    let correct = test
        .samples
        .par_iter()
        .map(|s| forward(params, spec, &s.features).map(|p| usize::from(p.argmax() == s.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Index of the next round to run.
    pub round: usize,
    pub global: ParameterVector,
    /// Clients that took part in the most recent round.
    pub selected: Vec<usize>,
}

/// Data and configuration of one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ExperimentConfig,
    shards: Vec<ClientShard>,
    test: Dataset,
}

impl Simulation {
    /// Generate the synthetic task, partition it and draw the test set.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let task = SyntheticTask::new(cfg.task_spec(), cfg.seed)?;
        let train = task.draw(
            cfg.partition.samples_per_class,
            seed::derive(cfg.seed, &[tag::DATA, 1]),
        );
        let test = task.draw(
            cfg.task.test_samples_per_class,
            seed::derive(cfg.seed, &[tag::TEST]),
        );
        let shards = dirichlet_partition(&train, &cfg.partition)?;
        Ok(Simulation { cfg, shards, test })
    }

    pub fn with_data(
        cfg: ExperimentConfig,
        shards: Vec<ClientShard>,
        test: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        if shards.len() != cfg.num_clients {
            return Err(Error::InvalidConfig(format!(
                "expected {} shards, got {}",
                cfg.num_clients,
                shards.len()
            )));
        }
        Ok(Simulation { cfg, shards, test })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn initial_state(&self) -> RoundState {
        RoundState {
            round: 0,
            global: init_params(&self.cfg.model, seed::derive(self.cfg.seed, &[tag::INIT])),
            selected: Vec::new(),
        }
    }

    pub fn client_seed(&self, round: usize, client_id: usize) -> u64 {
        seed::derive(
            self.cfg.seed,
            &[tag::CLIENT, round as u64, client_id as u64],
        )
    }

    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, RoundMetrics)> {
        self.run_round_probed(state, &NoProbe)
    }

    pub fn run_round_probed(
        &self,
        state: &RoundState,
        probe: &dyn UpdateProbe,
    ) -> Result<(RoundState, RoundMetrics)> {
        let cfg = &self.cfg;
        if state.round >= cfg.rounds {
            return Err(Error::InvalidConfig(format!(
                "round {} is past the configured {} rounds",
                state.round, cfg.rounds
            )));
        }
        let mut rng = seed::child_rng(cfg.seed, &[tag::SELECT, state.round as u64]);
        let selected = select_clients(cfg.num_clients, cfg.clients_per_round, &mut rng)?;

        let global = &state.global;
        let updates = selected
            .par_iter()
            .map(|&id| {
                client_update_probed(
                    global,
                    &self.shards[id],
                    cfg,
                    self.client_seed(state.round, id),
                    probe,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let next = aggregate(
            updates
                .iter()
                .map(|u| (&u.params, u.num_labeled, u.num_unlabeled)),
        )?;
        let test_accuracy = evaluate(&next, &cfg.model, &self.test)?;

        let mut merged = ClientDiagnostics::new(cfg.model.num_classes, cfg.entropy_bins);
        let per_client = updates
            .iter()
            .map(|u| {
                let (count, accuracy, lambda) = match &u.diagnostics {
                    Some(d) => {
                        merged.merge(d);
                        (d.tally.count, d.tally.accuracy(), d.lambda.stats())
                    }
                    None => (
                        0,
                        None,
                        crate::metrics::LambdaAccumulator::new(cfg.model.num_classes).stats(),
                    ),
                };
                ClientMetrics {
                    client_id: u.client_id,
                    num_labeled: u.num_labeled,
                    num_unlabeled: u.num_unlabeled,
                    pseudo_count: count,
                    pseudo_accuracy: accuracy,
                    mean_lambda: lambda.mean,
                    lambda_majority: lambda.majority,
                    lambda_minority: lambda.minority,
                }
            })
            .collect();
        let metrics =
            RoundMetrics::from_diagnostics(state.round + 1, test_accuracy, &merged, per_client);

        Ok((
            RoundState {
                round: state.round + 1,
                global: next,
                selected,
            },
            metrics,
        ))
    }

    pub fn run(&self) -> Result<ExperimentOutcome> {
        let mut state = self.initial_state();
        let mut trace = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            let (next, metrics) = self.run_round(&state)?;
            state = next;
            trace.push(metrics);
        }
        Ok(ExperimentOutcome {
            trace,
            final_params: state.global,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trace: Vec<RoundMetrics>,
    pub final_params: ParameterVector,
}

impl ExperimentOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.trace.last().map_or(0.0, |m| m.test_accuracy)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    Simulation::new(cfg.clone())?.run()
}

/// Layout of the model described by `spec`, for building parameter vectors.
pub fn layout_of(spec: &ModelSpec) -> std::sync::Arc<model::ParamLayout> {
    std::sync::Arc::new(spec.layout())
}
