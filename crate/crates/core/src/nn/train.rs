use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    LayerGrad, LayerParams, Network, NetworkError, NetworkSpec, OmegaMode, Phase,
    Relaxation, BN_MOMENTUM,
};
use crate::dataio::{self, Dataset};
use crate::sparsity::{self, PenaltyState, SparsityError};

/// Smallest `tau` a learned domain may take; keeps `alpha < beta`.
pub const MIN_LEARNED_TAU: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error("dataset shape {found:?} does not match network input {expected:?}")]
    DataShape { expected: dataio::ImageShape, found: dataio::ImageShape },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

/// How the ones budget is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Target sparsity `s`; `EC = 1 - s`.
    Sparsity(f64),
    /// Target bits per weight `h*`; `EC = h^-1(h*)`.
    HStar(f64),
}

impl Budget {
    pub fn expected_connections(&self) -> Result<f64, SparsityError> {
        match *self {
            Budget::Sparsity(s) => sparsity::ec_from_sparsity(s),
            Budget::HStar(h) => sparsity::inverse_binary_entropy(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub budget: Budget,
    pub seed: u64,
    pub omega_mode: OmegaMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Random flip and shift, off by default.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            gamma: sparsity::DEFAULT_GAMMA,
            budget: Budget::Sparsity(0.95),
            seed: 0,
            omega_mode: OmegaMode::Learned,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<f64, TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainError::Config(format!("gamma {} must lie in [0, 1)", self.gamma)));
        }
        self.budget.expected_connections().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean task loss over the epoch's minibatches.
    pub task_loss: f64,
    /// Penalty `j` at the end of the epoch.
    pub penalty: f64,
    /// `lambda` of the last step.
    pub lambda: f64,
    pub ones_fraction: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Lowest `task_loss` seen so far.
    pub best_loss: f64,
}

impl EpochRecord {
    /// One line of the training log:
    /// `epoch=<n> loss=<f> j=<f> lambda=<f> ones=<f> acc=<f> val_acc=<f|->`.
    pub fn log_line(&self) -> String {
        let val = self.val_accuracy.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!(
            "epoch={} loss={:.9} j={:.9} lambda={:.9} ones={:.9} acc={:.6} val_acc={}",
            self.epoch, self.task_loss, self.penalty, self.lambda, self.ones_fraction, self.train_accuracy, val
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub expected_connections: f64,
    pub records: Vec<EpochRecord>,
    /// CRC-32 of the serialized final snapshot, hex.
    pub snapshot_id: String,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", r.log_line());
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
        }
    }

    fn step(&mut self, params: Vec<&mut f64>, grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, &g)) in params.into_iter().zip(grads).enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

pub fn train(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(TrainReport, Network), TrainError> {
    train_with_validation(spec, data, None, cfg)
}

/// Minibatch training of `L_BNN + lambda * j`, with `lambda` recomputed every
/// step so the penalty is the fraction `gamma` of the total loss.
///
/// Single-threaded and fully determined by `cfg.seed`.
pub fn train_with_validation(
    spec: &NetworkSpec,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(TrainReport, Network), TrainError> {
    let ec = cfg.validate()?;
    if data.shape != spec.input {
        return Err(TrainError::DataShape { expected: spec.input, found: data.shape });
    }
    if let Some(v) = validation {
        if v.shape != spec.input {
            return Err(TrainError::DataShape { expected: spec.input, found: v.shape });
        }
    }
    let mut net = Network::init(spec.clone(), cfg.omega_mode, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut penalty = PenaltyState::new(cfg.gamma, ec)?;
    let n_params = net.params_mut().len();
    let mut adam = Adam::new(n_params, cfg);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let sample_len = data.shape.len();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len() * sample_len);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let start = images.len();
                images.extend_from_slice(data.image(i));
                if cfg.augment {
                    dataio::augment(&mut images[start..], data.shape, 1, &mut rng);
                }
                labels.push(data.labels[i]);
            }
            let eval = net.evaluate(&images, &labels, Phase::Train, Relaxation::Binary, None, true)?;
            if !eval.task_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss: eval.task_loss });
            }
            let (ones, total) = net.ones_count();
            penalty.step(eval.task_loss, ones, total);
            let mut grads = eval.grads.expect("gradients requested");
            let pen_grad = sparsity::penalty_weight_gradient(penalty.lambda, penalty.j_value, total);
            if pen_grad != 0.0 {
                add_penalty_gradient(&net, &mut grads.layers, pen_grad);
            }
            let flat = grads.flatten(net.omega_mode, &net.spec);
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch, step, loss: f64::NAN });
            }
            adam.step(net.params_mut(), &flat, cosine_lr(cfg.learning_rate, step, total_steps));
            apply_running_stats(&mut net, &eval.bn_batch_stats);
            constrain_binarized(&mut net);
            loss_sum += eval.task_loss * chunk.len() as f64;
            step += 1;
        }
        let task_loss = loss_sum / data.len() as f64;
        best_loss = best_loss.min(task_loss);
        let (ones, total) = net.ones_count();
        let ones_fraction = if total == 0 { 0.0 } else { ones as f64 / total as f64 };
        records.push(EpochRecord {
            epoch,
            task_loss,
            penalty: if total == 0 { 0.0 } else { sparsity::penalty_from_counts(ones, total, ec) },
            lambda: penalty.lambda,
            ones_fraction,
            train_accuracy: evaluate_accuracy(&net, data)?,
            val_accuracy: validation.map(|v| evaluate_accuracy(&net, v)).transpose()?,
            best_loss,
        });
    }

    let json = serde_json::to_vec(&net).expect("network serializes");
    let snapshot_id = format!("{:08x}", crc32fast::hash(&json));
    Ok((TrainReport { expected_connections: ec, records, snapshot_id }, net))
}

fn add_penalty_gradient(net: &Network, grads: &mut [LayerGrad], per_weight: f64) {
    for ((layer, g), p) in net.spec.layers.iter().zip(grads.iter_mut()).zip(&net.params) {
        if let (true, LayerGrad::Weights { latent, .. }, LayerParams::Weights(w)) = (layer.is_binarized(), g, p) {
            for (gl, &wl) in latent.iter_mut().zip(&w.latent) {
                *gl += crate::binquant::ste_gradient(per_weight, wl);
            }
        }
    }
}

fn apply_running_stats(net: &mut Network, stats: &[Option<(Vec<f64>, Vec<f64>)>]) {
    for (p, s) in net.params.iter_mut().zip(stats) {
        if let (LayerParams::BatchNorm(bn), Some((mean, var))) = (p, s) {
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] = (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * mean[c];
                bn.running_var[c] = (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * var[c];
            }
        }
    }
}

/// Clips binarized latents to the STE window `[-1, 1]`, where they keep
/// receiving gradient, and keeps a learned `tau` positive.
fn constrain_binarized(net: &mut Network) {
    let learned = net.omega_mode == OmegaMode::Learned;
    for (layer, p) in net.spec.layers.iter().zip(net.params.iter_mut()) {
        if let (true, LayerParams::Weights(w)) = (layer.is_binarized(), p) {
            for v in &mut w.latent {
                *v = v.clamp(-1.0, 1.0);
            }
            if learned {
                w.tau = w.tau.max(MIN_LEARNED_TAU);
            }
        }
    }
}

/// Fraction of samples whose eval-phase argmax matches the label.
pub fn evaluate_accuracy(net: &Network, data: &Dataset) -> Result<f64, NetworkError> {
    let mut correct = 0usize;
    let chunk = 256;
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let images = &data.images[start * data.shape.len()..end * data.shape.len()];
        let preds = net.predict(images)?;
        correct += preds.iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
