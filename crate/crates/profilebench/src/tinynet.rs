//! Desk-scale MLP trainer that produces real weight trajectories.
//!
//! A fixed three-weight-layer perceptron (inputs -> 32 -> 16 -> classes,
//! rectifier hidden activations) trains full-batch on a synthetic Gaussian
//! cluster dataset, saving one weight snapshot per epoch and the final test
//! accuracy. Full-batch training keeps every run an exact function of
//! (config, dataset, seed).

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weightstats::{LayerWeights, WeightSnapshot};

pub const HIDDEN_SIZES: [usize; 2] = [32, 16];
const MOMENTUM_COEFF: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Momentum,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Sgd => write!(f, "sgd"),
            Optimizer::Momentum => write!(f, "momentum"),
            Optimizer::Adam => write!(f, "adam"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    Softmax,
    Sigmoid,
    Linear,
}

impl fmt::Display for FinalActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinalActivation::Softmax => write!(f, "softmax"),
            FinalActivation::Sigmoid => write!(f, "sigmoid"),
            FinalActivation::Linear => write!(f, "linear"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub config_id: String,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub final_activation: FinalActivation,
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "config `{}`: learning_rate must be positive",
                self.config_id
            )));
        }
        Ok(())
    }

    pub fn hyperparameter_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("optimizer".to_string(), self.optimizer.to_string()),
            ("learning_rate".to_string(), self.learning_rate.to_string()),
            ("final_activation".to_string(), self.final_activation.to_string()),
        ])
    }
}

/// Cartesian product of the axes in fixed order (optimizer-major, then
/// learning rate, then activation); ids join the axis values.
pub fn config_grid(
    optimizers: &[Optimizer],
    learning_rates: &[f64],
    activations: &[FinalActivation],
) -> Result<Vec<HyperConfig>> {
    if optimizers.is_empty() || learning_rates.is_empty() || activations.is_empty() {
        return Err(Error::invalid("config_grid: every axis needs at least one value"));
    }
    let mut configs = Vec::new();
    for &optimizer in optimizers {
        for &learning_rate in learning_rates {
            for &final_activation in activations {
                let config = HyperConfig {
                    config_id: format!("{optimizer}-{learning_rate}-{final_activation}"),
                    optimizer,
                    learning_rate,
                    final_activation,
                };
                config.validate()?;
                configs.push(config);
            }
        }
    }
    Ok(configs)
}

/// The default 3 x 4 x 3 grid (36 configurations).
pub fn default_grid() -> Vec<HyperConfig> {
    config_grid(
        &[Optimizer::Sgd, Optimizer::Momentum, Optimizer::Adam],
        &[0.1, 0.03, 0.01, 0.003],
        &[FinalActivation::Softmax, FinalActivation::Sigmoid, FinalActivation::Linear],
    )
    .expect("static axes are non-empty")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Within-class standard deviation around the class centroid.
    pub cluster_spread: f64,
    /// (train, validation, test) fractions, summing to 1.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n_samples: 3000,
            n_features: 5,
            n_classes: 2,
            cluster_spread: 2.0,
            split: (0.7, 0.15, 0.15),
            seed: 7,
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.n_features == 0 {
            return Err(Error::invalid("need at least 1 feature"));
        }
        if self.n_samples < self.n_classes {
            return Err(Error::invalid("need at least one sample per class"));
        }
        if !(self.cluster_spread >= 0.0) {
            return Err(Error::invalid("cluster_spread must be nonnegative"));
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        Ok(())
    }
}

/// One labeled partition: features are rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    pub n_features: usize,
    pub n_classes: usize,
}

/// Feature units of the synthetic data. Unnormalized, like raw instrument
/// counts; keeps full-batch gradients large enough that even the slowest
/// learning rates of the default grid move off initialization within the
/// standard 75 epochs.
pub const CENTROID_SCALE: f64 = 4.0;

/// Gaussian class clusters with seeded centroids drawn from
/// `N(0, CENTROID_SCALE^2)`, stratified into train/val/test. Deterministic
/// given the spec's seed.
pub fn make_dataset(spec: &SynthDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let d = spec.n_features;
    let centroids: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    CENTROID_SCALE * z
                })
                .collect()
        })
        .collect();

    let base = spec.n_samples / spec.n_classes;
    let extra = spec.n_samples % spec.n_classes;
    let mut buckets: [Vec<(Vec<f64>, usize)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, centroid) in centroids.iter().enumerate() {
        let count = base + usize::from(class < extra);
        let n_train = (spec.split.0 * count as f64).round() as usize;
        let n_val = ((spec.split.1 * count as f64).round() as usize).min(count - n_train);
        for i in 0..count {
            let sample: Vec<f64> = centroid
                .iter()
                .map(|&m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + spec.cluster_spread * noise
                })
                .collect();
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            buckets[bucket].push((sample, class));
        }
    }
    let to_split = |rows: &[(Vec<f64>, usize)]| -> SplitData {
        let n = rows.len();
        let mut x = DMatrix::zeros(n, d);
        let mut y = Vec::with_capacity(n);
        for (r, (sample, class)) in rows.iter().enumerate() {
            for (c, &v) in sample.iter().enumerate() {
                x[(r, c)] = v;
            }
            y.push(*class);
        }
        SplitData { x, y }
    };
    Ok(Dataset {
        train: to_split(&buckets[0]),
        val: to_split(&buckets[1]),
        test: to_split(&buckets[2]),
        n_features: d,
        n_classes: spec.n_classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// (in x out); logits are `x * kernel + bias`.
    pub kernel: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    pub fn to_snapshot(&self, config_id: &str, epoch: usize) -> WeightSnapshot {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let (rows, cols) = layer.kernel.shape();
                let mut kernel = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        kernel.push(layer.kernel[(r, c)]);
                    }
                }
                LayerWeights {
                    name: format!("dense_{i}"),
                    kernel_shape: vec![rows, cols],
                    kernel,
                    bias: layer.bias.iter().copied().collect(),
                }
            })
            .collect();
        WeightSnapshot { config_id: config_id.to_string(), epoch, layers }
    }
}

/// Glorot-uniform kernels (zero biases), drawn layer by layer in row-major
/// order.
pub fn init_params(n_features: usize, n_classes: usize, seed: u64) -> MlpParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sizes = [n_features, HIDDEN_SIZES[0], HIDDEN_SIZES[1], n_classes];
    let layers = sizes
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut kernel = DMatrix::zeros(fan_in, fan_out);
            for r in 0..fan_in {
                for c in 0..fan_out {
                    kernel[(r, c)] = (2.0 * rng.random::<f64>() - 1.0) * limit;
                }
            }
            LayerParams { kernel, bias: DVector::zeros(fan_out) }
        })
        .collect();
    MlpParams { layers }
}

fn add_row_broadcast(m: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        for (slot, b) in row.iter_mut().zip(bias.iter()) {
            *slot += *b;
        }
    }
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Forward {
    pre_activations: Vec<DMatrix<f64>>,
    activations: Vec<DMatrix<f64>>,
}

fn forward(params: &MlpParams, x: &DMatrix<f64>) -> Forward {
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations = vec![x.clone()];
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = activations.last().unwrap() * &layer.kernel;
        add_row_broadcast(&mut z, &layer.bias);
        let is_last = i + 1 == params.layers.len();
        let a = if is_last { z.clone() } else { relu(&z) };
        pre_activations.push(z);
        activations.push(a);
    }
    Forward { pre_activations, activations }
}

/// Per-row class probabilities under the final activation: softmax (also for
/// linear logits), or per-class sigmoid normalized to sum to 1.
pub fn predict_probabilities(
    params: &MlpParams,
    x: &DMatrix<f64>,
    activation: FinalActivation,
) -> DMatrix<f64> {
    let pass = forward(params, x);
    let logits = pass.pre_activations.last().unwrap();
    probabilities_from_logits(logits, activation)
}

fn probabilities_from_logits(logits: &DMatrix<f64>, activation: FinalActivation) -> DMatrix<f64> {
    let (n, k) = logits.shape();
    let mut p = DMatrix::zeros(n, k);
    for r in 0..n {
        match activation {
            FinalActivation::Softmax | FinalActivation::Linear => {
                let m = (0..k).map(|c| logits[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (logits[(r, c)] - m).exp();
                    p[(r, c)] = e;
                    z += e;
                }
                for c in 0..k {
                    p[(r, c)] /= z;
                }
            }
            FinalActivation::Sigmoid => {
                // log sigma(z) = -softplus(-z); normalize in log space.
                let logs: Vec<f64> = (0..k).map(|c| -softplus(-logits[(r, c)])).collect();
                let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
                let log_z = m + z.ln();
                for c in 0..k {
                    p[(r, c)] = (logs[c] - log_z).exp();
                }
            }
        }
    }
    p
}

/// Mean sparse categorical cross-entropy and the logit gradient (already
/// divided by the batch size).
fn loss_and_logit_grad(
    logits: &DMatrix<f64>,
    labels: &[usize],
    activation: FinalActivation,
) -> (f64, DMatrix<f64>) {
    let (n, k) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let mut grad = DMatrix::zeros(n, k);
    let mut loss = 0.0;
    for r in 0..n {
        let y = labels[r];
        match activation {
            FinalActivation::Softmax | FinalActivation::Linear => {
                let m = (0..k).map(|c| logits[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (logits[(r, c)] - m).exp()).sum();
                let lse = m + z.ln();
                loss += lse - logits[(r, y)];
                for c in 0..k {
                    let softmax = ((logits[(r, c)] - m).exp()) / z;
                    grad[(r, c)] = (softmax - f64::from(u8::from(c == y))) * inv_n;
                }
            }
            FinalActivation::Sigmoid => {
                // loss = -log sigma(z_y) + log sum_c sigma(z_c)
                let logs: Vec<f64> = (0..k).map(|c| -softplus(-logits[(r, c)])).collect();
                let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                loss += softplus(-logits[(r, y)]) + log_sum;
                for c in 0..k {
                    let zc = logits[(r, c)];
                    // d log_sum / dz_c = sigma'(z_c) / sum_j sigma(z_j)
                    let log_deriv = -softplus(-zc) - softplus(zc);
                    let mut g = (log_deriv - log_sum).exp();
                    if c == y {
                        // d(-log sigma(z_y))/dz_y = -(1 - sigma(z_y)),
                        // with sigma(z) = exp(-softplus(-z)).
                        g -= 1.0 - (-softplus(-zc)).exp();
                    }
                    grad[(r, c)] = g * inv_n;
                }
            }
        }
    }
    (loss * inv_n, grad)
}

/// Forward-only loss; the oracle side of gradient checks.
pub fn loss_only(
    params: &MlpParams,
    x: &DMatrix<f64>,
    labels: &[usize],
    activation: FinalActivation,
) -> Result<f64> {
    let pass = forward(params, x);
    let logits = pass.pre_activations.last().unwrap();
    let (loss, _) = loss_and_logit_grad(logits, labels, activation);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Mean loss and analytic parameter gradients via backpropagation.
pub fn loss_and_grad(
    params: &MlpParams,
    x: &DMatrix<f64>,
    labels: &[usize],
    activation: FinalActivation,
) -> Result<(f64, MlpParams)> {
    if x.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples vs {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let pass = forward(params, x);
    let logits = pass.pre_activations.last().unwrap();
    let (loss, mut delta) = loss_and_logit_grad(logits, labels, activation);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads: Vec<LayerParams> = Vec::with_capacity(params.layers.len());
    for i in (0..params.layers.len()).rev() {
        let input = &pass.activations[i];
        let kernel_grad = input.transpose() * &delta;
        let bias_grad = DVector::from_iterator(
            delta.ncols(),
            delta.column_iter().map(|col| col.sum()),
        );
        if i > 0 {
            let mut upstream = &delta * params.layers[i].kernel.transpose();
            let pre = &pass.pre_activations[i - 1];
            for r in 0..upstream.nrows() {
                for c in 0..upstream.ncols() {
                    if pre[(r, c)] <= 0.0 {
                        upstream[(r, c)] = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        grads.push(LayerParams { kernel: kernel_grad, bias: bias_grad });
    }
    grads.reverse();
    Ok((loss, MlpParams { layers: grads }))
}

enum OptimizerState {
    Sgd,
    Momentum { velocity: Vec<LayerParams> },
    Adam { m: Vec<LayerParams>, v: Vec<LayerParams>, t: i32 },
}

fn zeros_like(params: &MlpParams) -> Vec<LayerParams> {
    params
        .layers
        .iter()
        .map(|layer| LayerParams {
            kernel: DMatrix::zeros(layer.kernel.nrows(), layer.kernel.ncols()),
            bias: DVector::zeros(layer.bias.len()),
        })
        .collect()
}

fn apply_update(
    params: &mut MlpParams,
    grads: &MlpParams,
    learning_rate: f64,
    state: &mut OptimizerState,
) {
    match state {
        OptimizerState::Sgd => {
            for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
                layer.kernel -= learning_rate * &grad.kernel;
                layer.bias -= learning_rate * &grad.bias;
            }
        }
        OptimizerState::Momentum { velocity } => {
            for ((layer, grad), vel) in
                params.layers.iter_mut().zip(&grads.layers).zip(velocity.iter_mut())
            {
                vel.kernel = MOMENTUM_COEFF * &vel.kernel + &grad.kernel;
                vel.bias = MOMENTUM_COEFF * &vel.bias + &grad.bias;
                layer.kernel -= learning_rate * &vel.kernel;
                layer.bias -= learning_rate * &vel.bias;
            }
        }
        OptimizerState::Adam { m, v, t } => {
            *t += 1;
            let bias1 = 1.0 - ADAM_BETA1.powi(*t);
            let bias2 = 1.0 - ADAM_BETA2.powi(*t);
            for ((layer, grad), (mi, vi)) in
                params.layers.iter_mut().zip(&grads.layers).zip(m.iter_mut().zip(v.iter_mut()))
            {
                mi.kernel = ADAM_BETA1 * &mi.kernel + (1.0 - ADAM_BETA1) * &grad.kernel;
                mi.bias = ADAM_BETA1 * &mi.bias + (1.0 - ADAM_BETA1) * &grad.bias;
                vi.kernel =
                    ADAM_BETA2 * &vi.kernel + (1.0 - ADAM_BETA2) * grad.kernel.component_mul(&grad.kernel);
                vi.bias =
                    ADAM_BETA2 * &vi.bias + (1.0 - ADAM_BETA2) * grad.bias.component_mul(&grad.bias);
                layer.kernel -= learning_rate
                    * mi.kernel.map(|x| x / bias1).component_div(
                        &vi.kernel.map(|x| (x / bias2).sqrt() + ADAM_EPS),
                    );
                layer.bias -= learning_rate
                    * mi.bias.map(|x| x / bias1).component_div(
                        &vi.bias.map(|x| (x / bias2).sqrt() + ADAM_EPS),
                    );
            }
        }
    }
}

/// Fraction of rows whose argmax probability matches the label.
pub fn accuracy(
    params: &MlpParams,
    split: &SplitData,
    activation: FinalActivation,
) -> f64 {
    if split.y.is_empty() {
        return 0.0;
    }
    let p = predict_probabilities(params, &split.x, activation);
    let mut correct = 0usize;
    for (r, &label) in split.y.iter().enumerate() {
        let mut best = 0;
        for c in 1..p.ncols() {
            if p[(r, c)] > p[(r, best)] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / split.y.len() as f64
}

/// Trajectory of one training run: the per-epoch snapshots and the final
/// held-out test accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub config_id: String,
    pub snapshots: Vec<WeightSnapshot>,
    pub final_test_accuracy: f64,
    pub epochs_run: usize,
}

/// Full-batch training; one snapshot per epoch (after the update). With
/// `patience` set, training stops once validation accuracy has not improved
/// for that many consecutive epochs.
pub fn train(
    config: &HyperConfig,
    dataset: &Dataset,
    epochs: usize,
    patience: Option<usize>,
    seed: u64,
) -> Result<TrainRecord> {
    config.validate()?;
    if epochs == 0 {
        return Err(Error::invalid("train: need at least 1 epoch"));
    }
    let mut params = init_params(dataset.n_features, dataset.n_classes, seed);
    let mut state = match config.optimizer {
        Optimizer::Sgd => OptimizerState::Sgd,
        Optimizer::Momentum => OptimizerState::Momentum { velocity: zeros_like(&params) },
        Optimizer::Adam => OptimizerState::Adam {
            m: zeros_like(&params),
            v: zeros_like(&params),
            t: 0,
        },
    };

    let mut snapshots = Vec::with_capacity(epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for epoch in 1..=epochs {
        let (loss, grads) =
            loss_and_grad(&params, &dataset.train.x, &dataset.train.y, config.final_activation)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss {
                        config_id: config.config_id.clone(),
                        epoch,
                    },
                    other => other,
                })?;
        debug_assert!(loss.is_finite());
        apply_update(&mut params, &grads, config.learning_rate, &mut state);
        snapshots.push(params.to_snapshot(&config.config_id, epoch));
        if let Some(patience) = patience {
            let val_acc = accuracy(&params, &dataset.val, config.final_activation);
            if val_acc > best_val {
                best_val = val_acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    let final_test_accuracy = accuracy(&params, &dataset.test, config.final_activation);
    let epochs_run = snapshots.len();
    Ok(TrainRecord { config_id: config.config_id.clone(), snapshots, final_test_accuracy, epochs_run })
}
