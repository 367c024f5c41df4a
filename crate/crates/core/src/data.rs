//! Synthetic classification tasks, Dirichlet client partitioning and
//! feature-space augmentation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::seed::{self, tag};

/// One example. The label is always present; whether training may read it
/// depends on which pool of a [`ClientShard`] the sample sits in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Position in the generating dataset.
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of the Gaussian-mixture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Distance of every class mean from the origin.
    pub class_separation: f64,
    /// Standard deviation of the isotropic per-coordinate noise.
    pub noise_scale: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(
                "task needs at least two classes".into(),
            ));
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "input_dim and samples_per_class must be >= 1".into(),
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0)
            || !(self.noise_scale.is_finite() && self.noise_scale >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "class_separation and noise_scale must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Class means of a Gaussian-mixture task; draws any number of datasets
/// that share them (training pool, held-out test set).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    spec: TaskSpec,
    means: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(spec: TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::child_rng(seed, &[tag::DATA, 0]);
        let means = (0..spec.classes)
            .map(|_| {
                let mut dir: Vec<f64> = (0..spec.input_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut()
                    .for_each(|v| *v *= spec.class_separation / norm);
                dir
            })
            .collect();
        Ok(SyntheticTask { spec, means })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `per_class` samples of every class, class-major, ids `0..C*per_class`.
    pub fn draw(&self, per_class: usize, seed: u64) -> Dataset {
        let mut rng = seed::rng(seed);
        let mut samples = Vec::with_capacity(per_class * self.spec.classes);
        for (label, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                let features = mean
                    .iter()
                    .map(|m| m + self.spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample {
                    id: samples.len(),
                    features,
                    label,
                });
            }
        }
        Dataset {
            num_classes: self.spec.classes,
            input_dim: self.spec.input_dim,
            samples,
        }
    }
}

pub fn generate_synthetic(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    let task = SyntheticTask::new(spec.clone(), seed)?;
    Ok(task.draw(spec.samples_per_class, seed::derive(seed, &[tag::DATA, 1])))
}

/// A sample in a client's unlabeled pool.
///
/// Training code only gets [`UnlabeledSample::features`]; the true label is
/// reachable through the explicitly diagnostic accessor.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    sample: Sample,
    is_copy: bool,
}

impl UnlabeledSample {
    pub fn new(sample: Sample, is_copy: bool) -> Self {
        UnlabeledSample { sample, is_copy }
    }

    pub fn features(&self) -> &[f64] {
        &self.sample.features
    }

    pub fn sample_id(&self) -> usize {
        self.sample.id
    }

    /// True for label-stripped copies of the client's own labeled samples.
    pub fn is_copy(&self) -> bool {
        self.is_copy
    }

    /// Ground truth for diagnostics and oracle strategies only.
    pub fn hidden_label(&self) -> usize {
        self.sample.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<UnlabeledSample>,
}

impl ClientShard {
    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn labeled_distribution(&self, num_classes: usize) -> Result<ClassDistribution> {
        class_distribution_of(self.labeled.iter().map(|s| s.label), num_classes)
    }

    /// Class mix of the unlabeled pool, computed from hidden labels.
    pub fn unlabeled_distribution(&self, num_classes: usize) -> Result<ClassDistribution> {
        class_distribution_of(self.unlabeled.iter().map(|u| u.hidden_label()), num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub label_fraction: f64,
    pub seed: u64,
    pub classes: usize,
    pub samples_per_class: usize,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidConfig("num_clients must be >= 1".into()));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidConfig("dirichlet_alpha must be > 0".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "label_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// Probability mass over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    mass: Vec<f64>,
}

impl ClassDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() || mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidDistribution(
                "mass must be non-empty, finite and non-negative".into(),
            ));
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("mass sums to {sum}")));
        }
        Ok(ClassDistribution { mass })
    }

    pub fn uniform(num_classes: usize) -> Self {
        ClassDistribution {
            mass: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut mass = vec![0.0; num_classes];
        mass[class] = 1.0;
        ClassDistribution { mass }
    }

    /// Built by callers that guarantee normalization themselves.
    pub(crate) fn from_raw(mass: Vec<f64>) -> Self {
        debug_assert!((mass.iter().sum::<f64>() - 1.0).abs() <= Self::SUM_TOLERANCE);
        ClassDistribution { mass }
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn num_classes(&self) -> usize {
        self.mass.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.mass)
    }

    pub fn support_size(&self) -> usize {
        self.mass.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Empirical class frequencies of a pool.
pub fn class_distribution(pool: &[Sample], num_classes: usize) -> Result<ClassDistribution> {
    class_distribution_of(pool.iter().map(|s| s.label), num_classes)
}

pub fn class_distribution_of(
    labels: impl IntoIterator<Item = usize>,
    num_classes: usize,
) -> Result<ClassDistribution> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for label in labels {
        if label >= num_classes {
            return Err(Error::InvalidTarget(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        counts[label] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyPool);
    }
    Ok(ClassDistribution::from_raw(
        counts.iter().map(|&c| c as f64 / total as f64).collect(),
    ))
}

fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.iter().map(|d| d / sum).collect();
        }
    }
}

/// Per-class client proportions and assignments for one pool.
struct PoolAssignment {
    /// `proportions[class][client]`
    proportions: Vec<Vec<f64>>,
    /// One bucket of samples per client.
    buckets: Vec<Vec<Sample>>,
}

fn assign_pool<R: Rng>(
    per_class: &[Vec<Sample>],
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> PoolAssignment {
    let mut buckets = vec![Vec::new(); k];
    let mut proportions = Vec::with_capacity(per_class.len());
    for samples in per_class {
        let props = sample_dirichlet(alpha, k, rng);
        let index = WeightedIndex::new(&props).expect("dirichlet draw has positive mass");
        for sample in samples {
            buckets[index.sample(rng)].push(sample.clone());
        }
        proportions.push(props);
    }
    PoolAssignment {
        proportions,
        buckets,
    }
}

/// Give every client at least one labeled sample by moving one sample of the
/// client's most probable labeled class out of the largest donor.
fn repair_empty_labeled(assign: &mut PoolAssignment) -> Result<()> {
    let k = assign.buckets.len();
    for needy in 0..k {
        if !assign.buckets[needy].is_empty() {
            continue;
        }
        let class = argmax(
            &assign
                .proportions
                .iter()
                .map(|p| p[needy])
                .collect::<Vec<_>>(),
        );
        let largest = |pred: &dyn Fn(&Vec<Sample>) -> bool| {
            (0..k)
                .filter(|&d| d != needy && assign.buckets[d].len() >= 2 && pred(&assign.buckets[d]))
                .max_by(|&a, &b| {
                    assign.buckets[a]
                        .len()
                        .cmp(&assign.buckets[b].len())
                        .then(b.cmp(&a))
                })
        };
        let donor = largest(&|b: &Vec<Sample>| b.iter().any(|s| s.label == class))
            .map(|d| (d, Some(class)))
            .or_else(|| largest(&|_: &Vec<Sample>| true).map(|d| (d, None)))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "not enough labeled samples to give each of {k} clients one"
                ))
            })?;
        let (donor, class) = donor;
        let bucket = &mut assign.buckets[donor];
        let pos = match class {
            Some(c) => bucket
                .iter()
                .rposition(|s| s.label == c)
                .expect("donor holds the class"),
            None => bucket.len() - 1,
        };
        let moved = bucket.remove(pos);
        assign.buckets[needy].push(moved);
    }
    Ok(())
}

/// Split `dataset` into `cfg.num_clients` shards with Dirichlet label skew.
///
/// Each class is split into a labeled part (`round(rho * n_c)` samples) and an
/// unlabeled part; both are then spread over clients by independent
/// `Dir(alpha)` draws. Every client's unlabeled pool finally receives
/// label-stripped copies of its own labeled samples.
pub fn dirichlet_partition(dataset: &Dataset, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyPool);
    }
    if cfg.classes != dataset.num_classes {
        return Err(Error::InvalidConfig(format!(
            "partition expects {} classes, dataset has {}",
            cfg.classes, dataset.num_classes
        )));
    }
    let mut rng = seed::child_rng(cfg.seed, &[tag::PARTITION]);

    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); dataset.num_classes];
    for s in &dataset.samples {
        by_class[s.label].push(s.clone());
    }
    let mut labeled = Vec::with_capacity(by_class.len());
    let mut unlabeled = Vec::with_capacity(by_class.len());
    for mut samples in by_class {
        samples.shuffle(&mut rng);
        let n_labeled = (cfg.label_fraction * samples.len() as f64).round() as usize;
        let rest = samples.split_off(n_labeled.min(samples.len()));
        labeled.push(samples);
        unlabeled.push(rest);
    }

    let mut labeled_assign = assign_pool(&labeled, cfg.num_clients, cfg.dirichlet_alpha, &mut rng);
    let unlabeled_assign = assign_pool(&unlabeled, cfg.num_clients, cfg.dirichlet_alpha, &mut rng);
    repair_empty_labeled(&mut labeled_assign)?;

    Ok(labeled_assign
        .buckets
        .into_iter()
        .zip(unlabeled_assign.buckets)
        .enumerate()
        .map(|(client_id, (labeled, unlabeled))| {
            let mut pool: Vec<UnlabeledSample> = unlabeled
                .into_iter()
                .map(|sample| UnlabeledSample {
                    sample,
                    is_copy: false,
                })
                .collect();
            pool.extend(labeled.iter().map(|s| UnlabeledSample {
                sample: s.clone(),
                is_copy: true,
            }));
            ClientShard {
                client_id,
                labeled,
                unlabeled: pool,
            }
        })
        .collect())
}

/// Noise levels of the two augmentation views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub drop_prob: f64,
}

impl AugmentConfig {
    /// Defaults relative to the feature noise scale of the task.
    pub fn for_scale(scale: f64) -> Self {
        AugmentConfig {
            weak_sigma: 0.05 * scale,
            strong_sigma: 0.2 * scale,
            drop_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0 && self.strong_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "augmentation sigmas must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig("drop_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn add_noise<R: Rng>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn weak_augment<R: Rng>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    add_noise(x, sigma, rng)
}

/// Gaussian noise followed by independent zeroing of each coordinate.
pub fn strong_augment<R: Rng>(x: &[f64], sigma: f64, drop_prob: f64, rng: &mut R) -> Vec<f64> {
    let mut out = add_noise(x, sigma, rng);
    if drop_prob > 0.0 {
        for v in &mut out {
            if rng.random_bool(drop_prob) {
                *v = 0.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Labeled,
    Unlabeled,
}

/// One line of a shard export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub client_id: usize,
    pub pool: Pool,
    pub sample_id: usize,
    pub label: usize,
    pub is_copy: bool,
    pub features: Vec<f64>,
}

/// Write shards as line-delimited JSON, labeled pool before unlabeled pool.
pub fn export_shards<W: Write>(shards: &[ClientShard], mut out: W) -> Result<()> {
    for shard in shards {
        let labeled = shard.labeled.iter().map(|s| ShardRecord {
            client_id: shard.client_id,
            pool: Pool::Labeled,
            sample_id: s.id,
            label: s.label,
            is_copy: false,
            features: s.features.clone(),
        });
        let unlabeled = shard.unlabeled.iter().map(|u| ShardRecord {
            client_id: shard.client_id,
            pool: Pool::Unlabeled,
            sample_id: u.sample_id(),
            label: u.hidden_label(),
            is_copy: u.is_copy(),
            features: u.features().to_vec(),
        });
        for record in labeled.chain(unlabeled) {
            let line = serde_json::to_string(&record).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn import_shards<R: BufRead>(input: R) -> Result<Vec<ClientShard>> {
    let mut shards: BTreeMap<usize, ClientShard> = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ShardRecord = serde_json::from_str(&line).map_err(|e| Error::ShardFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        let shard = shards
            .entry(record.client_id)
            .or_insert_with(|| ClientShard {
                client_id: record.client_id,
                labeled: Vec::new(),
                unlabeled: Vec::new(),
            });
        let sample = Sample {
            id: record.sample_id,
            features: record.features,
            label: record.label,
        };
        match record.pool {
            Pool::Labeled => shard.labeled.push(sample),
            Pool::Unlabeled => shard.unlabeled.push(UnlabeledSample {
                sample,
                is_copy: record.is_copy,
            }),
        }
    }
    Ok(shards.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(classes: usize, per_class: usize) -> TaskSpec {
        TaskSpec {
            classes,
            input_dim: 4,
            samples_per_class: per_class,
            class_separation: 3.0,
            noise_scale: 1.0,
        }
    }

    fn partition_cfg(k: usize, alpha: f64, seed: u64) -> PartitionConfig {
        PartitionConfig {
            num_clients: k,
            dirichlet_alpha: alpha,
            label_fraction: 0.1,
            seed,
            classes: 10,
            samples_per_class: 100,
        }
    }

    fn kl_to_uniform(q: &ClassDistribution) -> f64 {
        let c = q.num_classes() as f64;
        q.mass()
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|m| m * (m * c).ln())
            .sum()
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let s = spec(3, 100);
        let a = generate_synthetic(&s, 4).unwrap();
        assert_eq!(a.len(), 300);
        for c in 0..3 {
            assert_eq!(a.samples.iter().filter(|x| x.label == c).count(), 100);
        }
        assert_eq!(a, generate_synthetic(&s, 4).unwrap());
        assert_ne!(a, generate_synthetic(&s, 5).unwrap());
    }

    #[test]
    fn well_separated_task_is_solved_by_nearest_centroid() {
        let s = TaskSpec {
            classes: 5,
            input_dim: 8,
            samples_per_class: 200,
            class_separation: 10.0,
            noise_scale: 0.5,
        };
        let task = SyntheticTask::new(s, 3).unwrap();
        let train = task.draw(200, 1);
        let test = task.draw(200, 2);
        let mut centroids = vec![vec![0.0; 8]; 5];
        for x in &train.samples {
            for (c, v) in centroids[x.label].iter_mut().zip(&x.features) {
                *c += v / 200.0;
            }
        }
        let correct = test
            .samples
            .iter()
            .filter(|x| {
                let d: Vec<f64> = centroids
                    .iter()
                    .map(|c| {
                        -c.iter()
                            .zip(&x.features)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                    })
                    .collect();
                argmax(&d) == x.label
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.99);
    }

    #[test]
    fn single_client_gets_everything() {
        let data = generate_synthetic(&spec(10, 100), 0).unwrap();
        let shards = dirichlet_partition(&data, &partition_cfg(1, 0.5, 1)).unwrap();
        assert_eq!(shards.len(), 1);
        let s = &shards[0];
        assert_eq!(s.num_labeled(), 100);
        let originals = s.unlabeled.iter().filter(|u| !u.is_copy()).count();
        assert_eq!(originals + s.num_labeled(), 1000);
        assert_eq!(s.num_unlabeled(), 1000);
        let mut copies: Vec<usize> = s
            .unlabeled
            .iter()
            .filter(|u| u.is_copy())
            .map(|u| u.sample_id())
            .collect();
        let mut labeled: Vec<usize> = s.labeled.iter().map(|x| x.id).collect();
        copies.sort_unstable();
        labeled.sort_unstable();
        assert_eq!(copies, labeled);
    }

    #[test]
    fn smaller_alpha_means_more_skew() {
        let data = generate_synthetic(&spec(10, 100), 0).unwrap();
        let mean_kl = |alpha: f64, seed: u64| {
            let shards = dirichlet_partition(&data, &partition_cfg(8, alpha, seed)).unwrap();
            shards
                .iter()
                .map(|s| kl_to_uniform(&s.unlabeled_distribution(10).unwrap()))
                .sum::<f64>()
                / shards.len() as f64
        };
        let (mut skewed, mut flat) = (0.0, 0.0);
        for seed in 0..20 {
            let a = mean_kl(0.1, seed);
            let b = mean_kl(10.0, seed);
            assert!(a > b, "seed {seed}: {a} <= {b}");
            skewed += a;
            flat += b;
        }
        assert!(skewed > flat);
    }

    #[test]
    fn every_client_receives_a_labeled_sample() {
        let data = generate_synthetic(&spec(10, 100), 0).unwrap();
        for seed in 0..10 {
            let shards = dirichlet_partition(&data, &partition_cfg(20, 0.05, seed)).unwrap();
            assert!(shards.iter().all(|s| s.num_labeled() >= 1));
            assert!(shards.iter().all(|s| s.num_labeled() <= s.num_unlabeled()));
        }
    }

    #[test]
    fn partition_rejects_too_few_labels() {
        let data = generate_synthetic(&spec(2, 5), 0).unwrap();
        let cfg = PartitionConfig {
            num_clients: 10,
            dirichlet_alpha: 1.0,
            label_fraction: 0.2,
            seed: 0,
            classes: 2,
            samples_per_class: 5,
        };
        assert!(matches!(
            dirichlet_partition(&data, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn class_distribution_counts() {
        let pool: Vec<Sample> = [0, 0, 1, 2]
            .iter()
            .enumerate()
            .map(|(id, &label)| Sample {
                id,
                features: vec![],
                label,
            })
            .collect();
        let d = class_distribution(&pool, 3).unwrap();
        assert_eq!(d.mass(), &[0.5, 0.25, 0.25]);
        let flat: Vec<Sample> = (0..6)
            .map(|i| Sample {
                id: i,
                features: vec![],
                label: i % 3,
            })
            .collect();
        let u = class_distribution(&flat, 3).unwrap();
        assert!(u.mass().iter().all(|m| (m - 1.0 / 3.0).abs() < 1e-15));
        assert!(kl_to_uniform(&u).abs() < 1e-12);
        assert_eq!(class_distribution(&[], 3).unwrap_err(), Error::EmptyPool);
    }

    #[test]
    fn augmentation_identities() {
        let mut rng = seed::rng(0);
        let x = vec![1.0, -2.0, 0.5];
        assert_eq!(weak_augment(&x, 0.0, &mut rng), x);
        assert_eq!(weak_augment(&x, 0.3, &mut rng).len(), 3);
        assert_eq!(strong_augment(&x, 0.0, 0.0, &mut rng), x);
        assert_eq!(strong_augment(&x, 0.5, 1.0, &mut rng), vec![0.0; 3]);
    }

    #[test]
    fn weak_augment_displacement_matches_variance() {
        let mut rng = seed::rng(1);
        let (d, sigma, n) = (5usize, 0.3f64, 10_000);
        let x = vec![0.7; d];
        let total: f64 = (0..n)
            .map(|_| {
                weak_augment(&x, sigma, &mut rng)
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let expected = d as f64 * sigma * sigma;
        assert!((total / n as f64 - expected).abs() < 0.1 * expected);
    }

    #[test]
    fn strong_augment_zeroing_rate() {
        let mut rng = seed::rng(2);
        let p = 0.1;
        let x = vec![1.0; 10];
        let mut zeros = 0usize;
        for _ in 0..10_000 {
            zeros += strong_augment(&x, 0.2, p, &mut rng)
                .iter()
                .filter(|v| **v == 0.0)
                .count();
        }
        let rate = zeros as f64 / 100_000.0;
        assert!((rate - p).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn shard_export_round_trips() {
        let data = generate_synthetic(&spec(10, 20), 7).unwrap();
        let shards = dirichlet_partition(&data, &partition_cfg(4, 0.5, 7)).unwrap();
        let mut buf = Vec::new();
        export_shards(&shards, &mut buf).unwrap();
        let back = import_shards(&buf[..]).unwrap();
        assert_eq!(back, shards);
        assert!(matches!(
            import_shards(&b"{not json}\n"[..]),
            Err(Error::ShardFormat { line: 1, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_partition_is_a_multiset_partition(
            k in 1usize..12,
            alpha in 0.05f64..10.0,
            seed in any::<u64>(),
        ) {
            let data = generate_synthetic(&spec(10, 30), 1).unwrap();
            let cfg = PartitionConfig { samples_per_class: 30, ..partition_cfg(k, alpha, seed) };
            let shards = dirichlet_partition(&data, &cfg).unwrap();
            prop_assert_eq!(shards.len(), k);

            let mut labeled: Vec<usize> = shards.iter().flat_map(|s| s.labeled.iter().map(|x| x.id)).collect();
            let mut unlabeled: Vec<usize> = shards.iter()
                .flat_map(|s| s.unlabeled.iter().filter(|u| !u.is_copy()).map(|u| u.sample_id()))
                .collect();
            // Labeled count is the per-class rounded fraction.
            prop_assert_eq!(labeled.len(), 10 * 3);
            let mut all: Vec<usize> = labeled.iter().chain(&unlabeled).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..300).collect::<Vec<_>>());
            labeled.sort_unstable();
            labeled.dedup();
            unlabeled.sort_unstable();
            unlabeled.dedup();
            prop_assert_eq!(labeled.len() + unlabeled.len(), 300);

            for s in &shards {
                prop_assert!(s.num_labeled() >= 1);
                let mut own: Vec<usize> = s.labeled.iter().map(|x| x.id).collect();
                let mut copies: Vec<usize> = s.unlabeled.iter().filter(|u| u.is_copy()).map(|u| u.sample_id()).collect();
                own.sort_unstable();
                copies.sort_unstable();
                prop_assert_eq!(own, copies);
                for d in [s.labeled_distribution(10).unwrap(), s.unlabeled_distribution(10).unwrap()] {
                    prop_assert!((d.mass().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }

            let again = dirichlet_partition(&data, &cfg).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            export_shards(&shards, &mut a).unwrap();
            export_shards(&again, &mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
