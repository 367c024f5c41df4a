//! Round diagnostics: pseudo-label quantity and quality, confidence entropy,
//! correction-coefficient statistics, class imbalance and local/global
//! consensus ranks.

use serde::{Deserialize, Serialize};

use crate::data::ClassDistribution;
use crate::model::Prediction;
use crate::pseudo::{DecisionKind, PseudoLabelDecision};

pub const DEFAULT_ENTROPY_BINS: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTally {
    pub count: usize,
    pub correct: usize,
}

impl PseudoLabelTally {
    pub fn record(&mut self, decision: &PseudoLabelDecision, truth: usize) {
        if let Some(class) = decision.target_class() {
            self.count += 1;
            if class == truth {
                self.correct += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &PseudoLabelTally) {
        self.count += other.count;
        self.correct += other.correct;
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

/// Number of issued pseudo-labels and the fraction whose target argmax
/// matches the hidden label; accuracy is `None` when nothing was issued.
pub fn pseudo_label_accuracy<'a>(
    decisions: impl IntoIterator<Item = (&'a PseudoLabelDecision, usize)>,
) -> (usize, Option<f64>) {
    let mut tally = PseudoLabelTally::default();
    for (d, truth) in decisions {
        tally.record(d, truth);
    }
    (tally.count, tally.accuracy())
}

/// Fixed-width histogram of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    counts: Vec<u64>,
}

impl ConfidenceHistogram {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 2, "need at least two bins");
        ConfidenceHistogram {
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, value: f64) {
        let bins = self.counts.len();
        let bin = ((value.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        self.counts[bin] += 1;
    }

    pub fn merge(&mut self, other: &ConfidenceHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Shannon entropy in nats of the normalized histogram.
    pub fn entropy(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let n = total as f64;
        Some(
            -self
                .counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p.ln()
                })
                .sum::<f64>(),
        )
    }
}

/// Entropy of the `bins`-bin histogram of `confidences`; `None` if empty.
pub fn confidence_entropy(confidences: &[f64], bins: usize) -> Option<f64> {
    let mut h = ConfidenceHistogram::new(bins);
    confidences.iter().for_each(|&v| h.add(v));
    h.entropy()
}

/// 1 + number of classes whose reference probability strictly exceeds that
/// of `class`.
pub fn consensus_rank(class: usize, reference: &Prediction) -> usize {
    let p = reference.probs()[class];
    1 + reference.probs().iter().filter(|&&q| q > p).count()
}

/// Histogram over ranks `1..=C`; entry `r - 1` counts rank `r`.
pub fn consensus_rank_histogram<'a>(
    pairs: impl IntoIterator<Item = (usize, &'a Prediction)>,
    num_classes: usize,
) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes];
    for (class, reference) in pairs {
        hist[consensus_rank(class, reference) - 1] += 1;
    }
    hist
}

/// `KL(q || uniform)`.
pub fn heterogeneity_kl(dist: &ClassDistribution) -> f64 {
    let c = dist.num_classes() as f64;
    dist.mass()
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|q| q * (q * c).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub mean: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub majority: Option<f64>,
    pub minority: Option<f64>,
}

/// Classes whose mass is at or above the median mass.
pub fn majority_classes(dist: &ClassDistribution) -> Vec<bool> {
    let mut sorted = dist.mass().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    dist.mass().iter().map(|&m| m >= median).collect()
}

/// Running sums behind [`LambdaStats`], mergeable across clients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LambdaAccumulator {
    class_sum: Vec<f64>,
    class_count: Vec<usize>,
    majority: (f64, usize),
    minority: (f64, usize),
}

impl LambdaAccumulator {
    pub fn new(num_classes: usize) -> Self {
        LambdaAccumulator {
            class_sum: vec![0.0; num_classes],
            class_count: vec![0; num_classes],
            ..Default::default()
        }
    }

    pub fn add(&mut self, lambda: f64, class: usize, is_majority: bool) {
        self.class_sum[class] += lambda;
        self.class_count[class] += 1;
        let side = if is_majority {
            &mut self.majority
        } else {
            &mut self.minority
        };
        side.0 += lambda;
        side.1 += 1;
    }

    pub fn merge(&mut self, other: &LambdaAccumulator) {
        for c in 0..self.class_sum.len() {
            self.class_sum[c] += other.class_sum[c];
            self.class_count[c] += other.class_count[c];
        }
        self.majority.0 += other.majority.0;
        self.majority.1 += other.majority.1;
        self.minority.0 += other.minority.0;
        self.minority.1 += other.minority.1;
    }

    pub fn stats(&self) -> LambdaStats {
        let ratio = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        LambdaStats {
            mean: ratio(self.class_sum.iter().sum(), self.class_count.iter().sum()),
            per_class: self
                .class_sum
                .iter()
                .zip(&self.class_count)
                .map(|(&s, &n)| ratio(s, n))
                .collect(),
            majority: ratio(self.majority.0, self.majority.1),
            minority: ratio(self.minority.0, self.minority.1),
        }
    }
}

/// Mean correction coefficient overall, per local pseudo-label class, and
/// split by whether that class is a majority class of `shard_dist`.
///
/// `records` holds `(lambda, local class)` of corrected-soft decisions.
pub fn lambda_statistics(records: &[(f64, usize)], shard_dist: &ClassDistribution) -> LambdaStats {
    let majority = majority_classes(shard_dist);
    let mut acc = LambdaAccumulator::new(shard_dist.num_classes());
    for &(lambda, class) in records {
        acc.add(lambda, class, majority[class]);
    }
    acc.stats()
}

/// Everything a client reports about its pseudo-labeling in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDiagnostics {
    pub tally: PseudoLabelTally,
    pub corrected: usize,
    pub local_hard: usize,
    pub global_hard: usize,
    pub abstained: usize,
    pub local_confidence: ConfidenceHistogram,
    pub global_confidence: ConfidenceHistogram,
    pub local_in_global: Vec<u64>,
    pub global_in_local: Vec<u64>,
    pub lambda: LambdaAccumulator,
}

impl ClientDiagnostics {
    pub fn new(num_classes: usize, bins: usize) -> Self {
        ClientDiagnostics {
            tally: PseudoLabelTally::default(),
            corrected: 0,
            local_hard: 0,
            global_hard: 0,
            abstained: 0,
            local_confidence: ConfidenceHistogram::new(bins),
            global_confidence: ConfidenceHistogram::new(bins),
            local_in_global: vec![0; num_classes],
            global_in_local: vec![0; num_classes],
            lambda: LambdaAccumulator::new(num_classes),
        }
    }

    /// Record the weak-view predictions of one unlabeled sample and the
    /// decision finally used for training.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        p_l: &Prediction,
        p_g: &Prediction,
        decision: &PseudoLabelDecision,
        truth: usize,
        tau: f64,
        majority: &[bool],
    ) {
        self.local_confidence.add(p_l.max());
        self.global_confidence.add(p_g.max());
        if p_l.max() > tau {
            self.local_in_global[consensus_rank(p_l.argmax(), p_g) - 1] += 1;
        }
        if p_g.max() > tau {
            self.global_in_local[consensus_rank(p_g.argmax(), p_l) - 1] += 1;
        }
        self.tally.record(decision, truth);
        match decision.kind {
            DecisionKind::CorrectedSoft => self.corrected += 1,
            DecisionKind::LocalHard => self.local_hard += 1,
            DecisionKind::GlobalHard => self.global_hard += 1,
            DecisionKind::Abstain => self.abstained += 1,
        }
        if let Some(lambda) = decision.lambda {
            let class = decision.local_class;
            self.lambda.add(lambda, class, majority[class]);
        }
    }

    pub fn merge(&mut self, other: &ClientDiagnostics) {
        self.tally.merge(&other.tally);
        self.corrected += other.corrected;
        self.local_hard += other.local_hard;
        self.global_hard += other.global_hard;
        self.abstained += other.abstained;
        self.local_confidence.merge(&other.local_confidence);
        self.global_confidence.merge(&other.global_confidence);
        for (a, b) in self.local_in_global.iter_mut().zip(&other.local_in_global) {
            *a += b;
        }
        for (a, b) in self.global_in_local.iter_mut().zip(&other.global_in_local) {
            *a += b;
        }
        self.lambda.merge(&other.lambda);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub pseudo_count: usize,
    pub pseudo_accuracy: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub lambda_majority: Option<f64>,
    pub lambda_minority: Option<f64>,
}

/// Per-round record of the federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based: the number of aggregations performed so far.
    pub round: usize,
    pub test_accuracy: f64,
    pub pseudo_count: usize,
    pub pseudo_accuracy: Option<f64>,
    pub corrected_count: usize,
    pub local_hard_count: usize,
    pub global_hard_count: usize,
    pub abstain_count: usize,
    pub mean_lambda: Option<f64>,
    pub lambda_by_class: Vec<Option<f64>>,
    pub lambda_majority: Option<f64>,
    pub lambda_minority: Option<f64>,
    pub entropy_local: Option<f64>,
    pub entropy_global: Option<f64>,
    pub consensus_local_in_global: Vec<u64>,
    pub consensus_global_in_local: Vec<u64>,
    pub per_client: Vec<ClientMetrics>,
}

impl RoundMetrics {
    pub fn from_diagnostics(
        round: usize,
        test_accuracy: f64,
        merged: &ClientDiagnostics,
        per_client: Vec<ClientMetrics>,
    ) -> Self {
        let lambda = merged.lambda.stats();
        RoundMetrics {
            round,
            test_accuracy,
            pseudo_count: merged.tally.count,
            pseudo_accuracy: merged.tally.accuracy(),
            corrected_count: merged.corrected,
            local_hard_count: merged.local_hard,
            global_hard_count: merged.global_hard,
            abstain_count: merged.abstained,
            mean_lambda: lambda.mean,
            lambda_by_class: lambda.per_class,
            lambda_majority: lambda.majority,
            lambda_minority: lambda.minority,
            entropy_local: merged.local_confidence.entropy(),
            entropy_global: merged.global_confidence.entropy(),
            consensus_local_in_global: merged.local_in_global.clone(),
            consensus_global_in_local: merged.global_in_local.clone(),
            per_client,
        }
    }
}

/// `round` of the first record reaching `threshold` test accuracy.
pub fn rounds_to_threshold(trace: &[RoundMetrics], threshold: f64) -> Option<usize> {
    trace
        .iter()
        .find(|m| m.test_accuracy >= threshold)
        .map(|m| m.round)
}

/// Mean of the defined values, `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
