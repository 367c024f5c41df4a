//! Small fully connected classifier with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParameterVector`] so that clients and the
//! server can exchange and average them without knowing the network shape.
//! Each layer contributes a row-major `in x out` weight block followed by an
//! `out`-sized bias block.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Lower bound applied to log-probabilities inside the losses.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

/// Tolerance on target normalization accepted by the soft-target loss.
pub const TARGET_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

/// Shape of the classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Empty means a linear (softmax regression) model.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(
                "hidden layer widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn layout(&self) -> ParamLayout {
        let widths = self.widths();
        let mut blocks = Vec::with_capacity(2 * (widths.len() - 1));
        let mut offset = 0;
        for (layer, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            blocks.push(Block {
                layer,
                kind: BlockKind::Weight,
                rows: fan_in,
                cols: fan_out,
                offset,
            });
            offset += fan_in * fan_out;
            blocks.push(Block {
                layer,
                kind: BlockKind::Bias,
                rows: 1,
                cols: fan_out,
                offset,
            });
            offset += fan_out;
        }
        ParamLayout {
            blocks,
            len: offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub layer: usize,
    pub kind: BlockKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps (layer, shape) to index ranges of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    len: usize,
}

impl ParamLayout {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat model weights together with their layout.
#[derive(Debug, Clone)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl PartialEq for ParameterVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.values == other.values
    }
}

impl ParameterVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParameterVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if *self.layout != spec.layout() {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    /// `self += scale * other`, layouts must match.
    pub fn add_scaled(&mut self, other: &ParameterVector, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::LayoutMismatch);
        }
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += scale * o;
        }
        Ok(())
    }
}

/// Normalized class-probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    probs: Vec<f64>,
}

impl Prediction {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(
                "need at least two classes".into(),
            ));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDistribution(
                "entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Prediction { probs })
    }

    /// Numerically stable softmax of `logits`.
    pub fn from_logits(logits: &[f64]) -> Self {
        Prediction {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn max(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.probs)
    }
}

/// Lowest index among the maxima of `values`.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits
        .iter()
        .map(|z| (z - lse).max(LOG_PROB_FLOOR))
        .collect()
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let layout = Arc::new(spec.layout());
    let mut params = ParameterVector::zeros(layout.clone());
    let mut rng = seed::rng(seed);
    for block in layout.blocks() {
        if block.kind == BlockKind::Weight {
            let bound = 1.0 / (block.rows as f64).sqrt();
            for v in &mut params.values[block.range()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }
    params
}

/// Activations cached by the forward pass: `pre[l]`/`post[l]` belong to
/// hidden layer `l`; `logits` is the final affine output.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn layer_blocks(layout: &ParamLayout) -> impl Iterator<Item = (&Block, &Block)> {
    layout.blocks().chunks(2).map(|pair| (&pair[0], &pair[1]))
}

fn affine(params: &[f64], weight: &Block, bias: &Block, input: &[f64]) -> Vec<f64> {
    let w = &params[weight.range()];
    let mut out = params[bias.range()].to_vec();
    for (i, &a) in input.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &w[i * weight.cols..(i + 1) * weight.cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += a * wij;
        }
    }
    out
}

fn run_forward(params: &ParameterVector, spec: &ModelSpec, x: &[f64]) -> Trace {
    let layers: Vec<_> = layer_blocks(&params.layout).collect();
    let mut pre = Vec::with_capacity(layers.len() - 1);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len() - 1);
    for (weight, bias) in &layers[..layers.len() - 1] {
        let input = post.last().map(Vec::as_slice).unwrap_or(x);
        let z = affine(&params.values, weight, bias, input);
        let a = z.iter().map(|&v| spec.activation.apply(v)).collect();
        pre.push(z);
        post.push(a);
    }
    let (weight, bias) = layers[layers.len() - 1];
    let input = post.last().map(Vec::as_slice).unwrap_or(x);
    let logits = affine(&params.values, weight, bias, input);
    Trace { pre, post, logits }
}

fn check_input(spec: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    Ok(())
}

pub fn forward(params: &ParameterVector, spec: &ModelSpec, x: &[f64]) -> Result<Prediction> {
    params.check_spec(spec)?;
    check_input(spec, x)?;
    Ok(Prediction::from_logits(
        &run_forward(params, spec, x).logits,
    ))
}

/// Target of one training example.
#[derive(Debug, Clone, Copy)]
enum Target<'a> {
    Class(usize),
    Soft(&'a [f64]),
}

impl Target<'_> {
    fn weight(&self, class: usize) -> f64 {
        match *self {
            Target::Class(c) => {
                if c == class {
                    1.0
                } else {
                    0.0
                }
            }
            Target::Soft(t) => t[class],
        }
    }
}

/// Accumulate `-sum_c t_c log p_c` and its gradient for one example.
fn accumulate_example(
    params: &ParameterVector,
    spec: &ModelSpec,
    x: &[f64],
    target: Target<'_>,
    grad: &mut [f64],
) -> f64 {
    let trace = run_forward(params, spec, x);
    let log_probs = log_softmax(&trace.logits);
    let probs = softmax(&trace.logits);

    let loss = -(0..spec.num_classes)
        .map(|c| {
            let t = target.weight(c);
            if t == 0.0 {
                0.0
            } else {
                t * log_probs[c]
            }
        })
        .sum::<f64>();

    // d loss / d logits = p - t for a normalized target.
    let mut delta: Vec<f64> = (0..spec.num_classes)
        .map(|c| probs[c] - target.weight(c))
        .collect();

    let layers: Vec<_> = layer_blocks(&params.layout).collect();
    for l in (0..layers.len()).rev() {
        let (weight, bias) = layers[l];
        let input = if l == 0 { x } else { &trace.post[l - 1] };
        {
            let gw = &mut grad[weight.range()];
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut gw[i * weight.cols..(i + 1) * weight.cols];
                for (g, &d) in row.iter_mut().zip(&delta) {
                    *g += a * d;
                }
            }
        }
        for (g, &d) in grad[bias.range()].iter_mut().zip(&delta) {
            *g += d;
        }
        if l > 0 {
            let w = &params.values[weight.range()];
            let prev = l - 1;
            delta = (0..weight.rows)
                .map(|i| {
                    let row = &w[i * weight.cols..(i + 1) * weight.cols];
                    let back: f64 = row.iter().zip(&delta).map(|(wij, d)| wij * d).sum();
                    back * spec
                        .activation
                        .derivative(trace.pre[prev][i], trace.post[prev][i])
                })
                .collect();
        }
    }
    loss
}

fn mean_loss_grad<'a>(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: impl ExactSizeIterator<Item = (&'a [f64], Target<'a>)>,
) -> (f64, ParameterVector) {
    let n = batch.len() as f64;
    let mut grad = ParameterVector::zeros(params.layout.clone());
    let mut loss = 0.0;
    for (x, target) in batch {
        loss += accumulate_example(params, spec, x, target, &mut grad.values);
    }
    for g in &mut grad.values {
        *g /= n;
    }
    (loss / n, grad)
}

/// Mean cross-entropy of `batch` against hard labels, with its gradient.
pub fn supervised_loss_grad(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &[(&[f64], usize)],
) -> Result<(f64, ParameterVector)> {
    params.check_spec(spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for &(x, y) in batch {
        check_input(spec, x)?;
        if y >= spec.num_classes {
            return Err(Error::InvalidTarget(format!(
                "label {y} out of range for {} classes",
                spec.num_classes
            )));
        }
    }
    Ok(mean_loss_grad(
        params,
        spec,
        batch.iter().map(|&(x, y)| (x, Target::Class(y))),
    ))
}

/// Mean cross-entropy `-sum_c t_c log p_c` of `batch` against soft targets.
///
/// This is the KL divergence from each target to the prediction plus the
/// target's entropy, so it stays finite for sparse targets.
pub fn unsupervised_loss_grad(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &[(&[f64], &[f64])],
) -> Result<(f64, ParameterVector)> {
    params.check_spec(spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for &(x, t) in batch {
        check_input(spec, x)?;
        if t.len() != spec.num_classes {
            return Err(Error::DimensionMismatch {
                expected: spec.num_classes,
                got: t.len(),
            });
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidTarget("entries must lie in [0, 1]".into()));
        }
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > TARGET_SUM_TOLERANCE {
            return Err(Error::InvalidTarget(format!("target sums to {sum}")));
        }
    }
    Ok(mean_loss_grad(
        params,
        spec,
        batch.iter().map(|&(x, t)| (x, Target::Soft(t))),
    ))
}

/// `params - learning_rate * grad`.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &ParameterVector,
    learning_rate: f64,
) -> Result<ParameterVector> {
    let mut out = params.clone();
    out.add_scaled(grad, -learning_rate)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec::new(input_dim, vec![], classes, Activation::Tanh).unwrap()
    }

    fn entropy(t: &[f64]) -> f64 {
        -t.iter()
            .filter(|&&v| v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>()
    }

    // Central differences of an arbitrary scalar function of the parameters.
    fn numeric_grad(
        params: &ParameterVector,
        eps: f64,
        f: impl Fn(&ParameterVector) -> f64,
    ) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let mut plus = params.clone();
                plus.values_mut()[i] += eps;
                let mut minus = params.clone();
                minus.values_mut()[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::new(4, vec![8], 3, Activation::Relu).unwrap();
        let a = init_params(&spec, 11);
        let b = init_params(&spec, 11);
        let c = init_params(&spec, 12);
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
        assert!(a.is_finite());
    }

    #[test]
    fn linear_layout_has_one_weight_and_one_bias_block() {
        let layout = linear(2, 3).layout();
        assert_eq!(layout.blocks().len(), 2);
        let w = &layout.blocks()[0];
        let b = &layout.blocks()[1];
        assert_eq!((w.kind, w.rows, w.cols), (BlockKind::Weight, 2, 3));
        assert_eq!((b.kind, b.len()), (BlockKind::Bias, 3));
        assert_eq!(layout.len(), 9);
    }

    #[test]
    fn zero_params_give_uniform_prediction() {
        let spec = ModelSpec::new(3, vec![5], 4, Activation::Tanh).unwrap();
        let params = ParameterVector::zeros(Arc::new(spec.layout()));
        let p = forward(&params, &spec, &[0.3, -1.0, 2.0]).unwrap();
        for &v in p.probs() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = Prediction::from_logits(&[0.0, 0.0, 2f64.ln()]);
        let expected = [0.25, 0.25, 0.5];
        assert!(max_abs_diff(p.probs(), &expected) < 1e-15);
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = Prediction::from_logits(&[1e4, -1e4, 0.0]);
        assert_eq!(p.argmax(), 0);
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert!(Prediction::new(p.probs().to_vec()).is_ok());
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let spec = linear(2, 3);
        let params = init_params(&spec, 0);
        assert_eq!(
            forward(&params, &spec, &[1.0]).unwrap_err(),
            Error::DimensionMismatch {
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn one_hot_prediction_gives_zero_loss() {
        // Large bias on class 1 makes the prediction one-hot to machine precision.
        let spec = linear(2, 3);
        let mut params = ParameterVector::zeros(Arc::new(spec.layout()));
        let bias = spec.layout().blocks()[1].range();
        params.values_mut()[bias.start + 1] = 100.0;
        let (loss, _) = supervised_loss_grad(&params, &spec, &[(&[0.5, 0.5][..], 1)]).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn uniform_prediction_loss_is_ln_classes() {
        let spec = linear(3, 10);
        let params = ParameterVector::zeros(Arc::new(spec.layout()));
        let x = [1.0, 2.0, 3.0];
        let (loss, _) = supervised_loss_grad(&params, &spec, &[(&x[..], 4)]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_rejects_empty_batch() {
        let spec = linear(2, 3);
        let params = init_params(&spec, 0);
        assert_eq!(
            supervised_loss_grad(&params, &spec, &[]).unwrap_err(),
            Error::EmptyBatch
        );
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let spec = linear(2, 3);
        let params = init_params(&spec, 5);
        let xs = [[0.7, -1.2], [0.1, 0.4]];
        let batch = [(&xs[0][..], 2usize), (&xs[1][..], 0)];
        let (_, grad) = supervised_loss_grad(&params, &spec, &batch).unwrap();
        let numeric = numeric_grad(&params, 1e-5, |p| {
            supervised_loss_grad(p, &spec, &batch).unwrap().0
        });
        assert!(max_abs_diff(grad.values(), &numeric) < 1e-4);
    }

    #[test]
    fn soft_target_equal_to_prediction_gives_its_entropy() {
        let spec = ModelSpec::new(2, vec![4], 3, Activation::Tanh).unwrap();
        let params = init_params(&spec, 9);
        let x = [0.3, -0.8];
        let p = forward(&params, &spec, &x).unwrap();
        let (loss, _) = unsupervised_loss_grad(&params, &spec, &[(&x[..], p.probs())]).unwrap();
        assert!((loss - entropy(p.probs())).abs() < 1e-12);
    }

    #[test]
    fn one_hot_soft_target_matches_supervised_loss() {
        let spec = ModelSpec::new(3, vec![6], 4, Activation::Relu).unwrap();
        let params = init_params(&spec, 2);
        let x = [0.5, -0.25, 1.5];
        let target = [0.0, 0.0, 1.0, 0.0];
        let (ls, gs) = supervised_loss_grad(&params, &spec, &[(&x[..], 2)]).unwrap();
        let (lu, gu) = unsupervised_loss_grad(&params, &spec, &[(&x[..], &target[..])]).unwrap();
        assert!((ls - lu).abs() < 1e-9);
        assert!(max_abs_diff(gs.values(), gu.values()) < 1e-12);
    }

    #[test]
    fn unsupervised_rejects_unnormalized_target() {
        let spec = linear(2, 3);
        let params = init_params(&spec, 0);
        let x = [0.0, 1.0];
        let bad = [0.5, 0.4, 0.0];
        assert!(matches!(
            unsupervised_loss_grad(&params, &spec, &[(&x[..], &bad[..])]),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn unsupervised_gradient_matches_finite_differences() {
        let spec = ModelSpec::new(2, vec![3], 3, Activation::Tanh).unwrap();
        let params = init_params(&spec, 17);
        let x = [0.4, -0.9];
        let t = [0.3, 0.0, 0.7];
        let batch = [(&x[..], &t[..])];
        let (_, grad) = unsupervised_loss_grad(&params, &spec, &batch).unwrap();
        let numeric = numeric_grad(&params, 1e-5, |p| {
            unsupervised_loss_grad(p, &spec, &batch).unwrap().0
        });
        assert!(max_abs_diff(grad.values(), &numeric) < 1e-4);
    }

    #[test]
    fn sgd_step_examples() {
        // 1 -> 2 linear model: two weights then two biases.
        let layout = Arc::new(linear(1, 2).layout());
        let p = ParameterVector::from_values(layout.clone(), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let g = ParameterVector::from_values(layout.clone(), vec![2.0, -2.0, 0.0, 0.0]).unwrap();
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert!(max_abs_diff(&out.values()[..2], &[0.8, 1.2]) < 1e-15);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert_eq!(
            sgd_step(&p, &ParameterVector::zeros(layout), 0.1).unwrap(),
            p
        );
    }

    #[test]
    fn sgd_step_rejects_layout_mismatch() {
        let a = init_params(&linear(2, 3), 0);
        let b = init_params(&linear(3, 3), 0);
        assert_eq!(sgd_step(&a, &b, 0.1).unwrap_err(), Error::LayoutMismatch);
    }

    fn small_instance() -> impl Strategy<Value = (ModelSpec, u64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..4, 0usize..2, 2usize..5, 1usize..4, any::<u64>()).prop_flat_map(
            |(input_dim, hidden, classes, batch, seed)| {
                let hidden_dims = if hidden == 0 { vec![] } else { vec![3] };
                let spec =
                    ModelSpec::new(input_dim, hidden_dims, classes, Activation::Tanh).unwrap();
                let xs =
                    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, input_dim), batch);
                let ts = prop::collection::vec(prop::collection::vec(0.0f64..1.0, classes), batch);
                (Just(spec), Just(seed), xs, ts)
            },
        )
    }

    fn normalize(t: &[f64]) -> Vec<f64> {
        let s: f64 = t.iter().sum::<f64>() + 1e-3;
        let mut out: Vec<f64> = t.iter().map(|v| (v + 1e-3 / t.len() as f64) / s).collect();
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn prop_supervised_gradient_matches_finite_differences((spec, seed, xs, ts) in small_instance()) {
            let params = init_params(&spec, seed);
            let batch: Vec<(&[f64], usize)> = xs.iter().zip(&ts)
                .map(|(x, t)| (x.as_slice(), argmax(t)))
                .collect();
            let (_, grad) = supervised_loss_grad(&params, &spec, &batch).unwrap();
            let numeric = numeric_grad(&params, 1e-5, |p| supervised_loss_grad(p, &spec, &batch).unwrap().0);
            prop_assert!(max_abs_diff(grad.values(), &numeric) < 1e-4);
        }

        #[test]
        fn prop_unsupervised_gradient_matches_finite_differences((spec, seed, xs, ts) in small_instance()) {
            let params = init_params(&spec, seed);
            let targets: Vec<Vec<f64>> = ts.iter().map(|t| normalize(t)).collect();
            let batch: Vec<(&[f64], &[f64])> = xs.iter().zip(&targets)
                .map(|(x, t)| (x.as_slice(), t.as_slice()))
                .collect();
            let (_, grad) = unsupervised_loss_grad(&params, &spec, &batch).unwrap();
            let numeric = numeric_grad(&params, 1e-5, |p| unsupervised_loss_grad(p, &spec, &batch).unwrap().0);
            prop_assert!(max_abs_diff(grad.values(), &numeric) < 1e-4);
        }

        #[test]
        fn prop_forward_is_a_distribution(
            seed in any::<u64>(),
            x in prop::collection::vec(-50.0f64..50.0, 4),
            relu in any::<bool>(),
        ) {
            let act = if relu { Activation::Relu } else { Activation::Tanh };
            let spec = ModelSpec::new(4, vec![6, 5], 7, act).unwrap();
            let p = forward(&init_params(&spec, seed), &spec, &x).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.probs().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn prop_cross_entropy_lower_bounds(
            seed in any::<u64>(),
            x in prop::collection::vec(-3.0f64..3.0, 3),
            raw in prop::collection::vec(0.0f64..1.0, 4),
            class in 0usize..4,
        ) {
            let spec = ModelSpec::new(3, vec![4], 4, Activation::Tanh).unwrap();
            let params = init_params(&spec, seed);
            let (hard, _) = supervised_loss_grad(&params, &spec, &[(&x[..], class)]).unwrap();
            prop_assert!(hard >= 0.0);
            let t = normalize(&raw);
            let (soft, _) = unsupervised_loss_grad(&params, &spec, &[(&x[..], &t[..])]).unwrap();
            prop_assert!(soft >= entropy(&t) - 1e-12);
        }

        #[test]
        fn prop_sgd_step_is_linear(
            p in prop::collection::vec(-5.0f64..5.0, 9),
            g1 in prop::collection::vec(-5.0f64..5.0, 9),
            g2 in prop::collection::vec(-5.0f64..5.0, 9),
            lr in 0.0f64..1.0,
        ) {
            let layout = Arc::new(linear(2, 3).layout());
            let pv = ParameterVector::from_values(layout.clone(), p).unwrap();
            let a = ParameterVector::from_values(layout.clone(), g1).unwrap();
            let b = ParameterVector::from_values(layout.clone(), g2).unwrap();
            let mut sum = a.clone();
            sum.add_scaled(&b, 1.0).unwrap();
            let once = sgd_step(&pv, &sum, lr).unwrap();
            let twice = sgd_step(&sgd_step(&pv, &a, lr).unwrap(), &b, lr).unwrap();
            prop_assert!(max_abs_diff(once.values(), twice.values()) < 1e-12);
        }
    }
}
