//! Trainable binarized networks.
//!
//! A network is a fixed feed-forward stack with a hand-written backward pass
//! per layer. Binarized layers keep latent real weights; the forward pass sees
//! `tau * sign(w) + phi` and gradients reach the latent weights through the
//! clipped straight-through estimator.

pub mod ops;
mod quantize;
mod train;

pub use quantize::{quantize_snapshot, reference_forward, reference_predict};
pub use train::{
    evaluate_accuracy, train, train_with_validation, Budget, EpochRecord, TrainConfig, TrainError,
    TrainReport,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binquant::{self, OmegaParams, RealWeights, SignWeights};
use crate::dataio::ImageShape;
use crate::model::{pool_output_shape, ActShape, Conv3x3, Domain};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("layer {layer}: {message}")]
    Invalid { layer: usize, message: String },
    #[error("network must end with a classifier")]
    MissingClassifier,
    #[error("expected {expected} values, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
}

/// How the two weight values of a binarized layer are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// Closed-form minimum quantization error, refit every step.
    Analytic,
    /// `(tau, phi)` trained by backpropagation.
    Learned,
    /// The fixed `{-1, +1}` domain.
    FixedPm1,
}

impl std::str::FromStr for OmegaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(OmegaMode::Analytic),
            "learned" => Ok(OmegaMode::Learned),
            "pm1" | "fixed_pm1" => Ok(OmegaMode::FixedPm1),
            other => Err(format!("unknown omega mode '{other}' (analytic|learned|pm1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { in_ch: usize, out_ch: usize, stride: usize, padding: usize, binarized: bool },
    Linear { in_features: usize, out_features: usize, binarized: bool },
    BatchNorm { channels: usize },
    SignAct,
    /// 2x2 max pool, stride 2.
    Pool,
    /// Full-precision output layer with bias.
    Classifier { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn is_binarized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv3x3 { binarized: true, .. } | LayerSpec::Linear { binarized: true, .. }
        )
    }

    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_ch, out_ch, .. } => out_ch * in_ch * 9,
            LayerSpec::Linear { in_features, out_features, .. }
            | LayerSpec::Classifier { in_features, out_features } => in_features * out_features,
            _ => 0,
        }
    }

    fn geometry(&self) -> Option<Conv3x3> {
        match *self {
            LayerSpec::Conv3x3 { in_ch, out_ch, stride, padding, .. } => {
                Some(Conv3x3 { in_ch, out_ch, stride, padding })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: ImageShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks the layer grammar and returns every layer's output shape.
    ///
    /// Rules: the first weight layer is full precision; a binarized layer
    /// reads `{-1, +1}` activations and is followed by `BatchNorm`, `SignAct`;
    /// the stack ends with a `Classifier`.
    pub fn validate(&self) -> Result<Vec<ActShape>, NetworkError> {
        let mut shape = ActShape::from(self.input);
        let mut domain = Domain::Real;
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut seen_weight_layer = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let invalid = |message: String| NetworkError::Invalid { layer: i, message };
            if layer.weight_count() > 0 {
                if !seen_weight_layer && layer.is_binarized() {
                    return Err(invalid("first weight layer must be full precision".into()));
                }
                seen_weight_layer = true;
            }
            if layer.is_binarized() {
                if domain != Domain::Binary {
                    return Err(invalid("binarized layer needs a sign activation upstream".into()));
                }
                let next_two = (self.layers.get(i + 1), self.layers.get(i + 2));
                if !matches!(next_two, (Some(LayerSpec::BatchNorm { .. }), Some(LayerSpec::SignAct))) {
                    return Err(invalid("binarized layer must be followed by BatchNorm, SignAct".into()));
                }
            }
            (shape, domain) = match *layer {
                LayerSpec::Conv3x3 { .. } => {
                    let g = layer.geometry().unwrap();
                    if g.in_ch == 0 || g.out_ch == 0 || g.stride == 0 {
                        return Err(invalid("conv sizes must be positive".into()));
                    }
                    (g.output_shape(shape).map_err(invalid)?, Domain::Real)
                }
                LayerSpec::Linear { in_features, out_features, .. } => {
                    if shape.len() != in_features || out_features == 0 {
                        return Err(invalid(format!(
                            "linear expects {in_features} inputs, got {}",
                            shape.len()
                        )));
                    }
                    (ActShape::Flat(out_features), Domain::Real)
                }
                LayerSpec::Classifier { in_features, out_features } => {
                    if shape.len() != in_features || out_features == 0 {
                        return Err(invalid(format!(
                            "classifier expects {in_features} inputs, got {}",
                            shape.len()
                        )));
                    }
                    if i + 1 != self.layers.len() {
                        return Err(invalid("classifier must be the last layer".into()));
                    }
                    (ActShape::Flat(out_features), Domain::Real)
                }
                LayerSpec::BatchNorm { channels } => {
                    if channels != shape.channels() {
                        return Err(invalid(format!(
                            "batchnorm over {channels} channels, input has {}",
                            shape.channels()
                        )));
                    }
                    (shape, Domain::Real)
                }
                LayerSpec::SignAct => (shape, Domain::Binary),
                LayerSpec::Pool => (pool_output_shape(shape).map_err(invalid)?, domain),
            };
            shapes.push(shape);
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Classifier { .. })) {
            return Err(NetworkError::MissingClassifier);
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Classifier { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    pub fn binarized_weight_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_binarized()).map(|l| l.weight_count()).sum()
    }

    /// Four weight layers: a full-precision stem, two binarized 3x3 convs
    /// without padding, and a full-precision classifier.
    pub fn desk(input: ImageShape, classes: usize, width: usize) -> Self {
        let c1 = width;
        let c2 = 2 * width;
        let h = input.height / 2;
        let w = input.width / 2;
        let flat = c2 * h.saturating_sub(4) * w.saturating_sub(4);
        NetworkSpec {
            input,
            layers: vec![
                LayerSpec::Conv3x3 { in_ch: input.channels, out_ch: c1, stride: 1, padding: 1, binarized: false },
                LayerSpec::BatchNorm { channels: c1 },
                LayerSpec::SignAct,
                LayerSpec::Pool,
                LayerSpec::Conv3x3 { in_ch: c1, out_ch: c2, stride: 1, padding: 0, binarized: true },
                LayerSpec::BatchNorm { channels: c2 },
                LayerSpec::SignAct,
                LayerSpec::Conv3x3 { in_ch: c2, out_ch: c2, stride: 1, padding: 0, binarized: true },
                LayerSpec::BatchNorm { channels: c2 },
                LayerSpec::SignAct,
                LayerSpec::Classifier { in_features: flat, out_features: classes },
            ],
        }
    }
}

/// Parameters of a weight-bearing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub latent: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    /// Current `(tau, phi)`; trained in learned mode, otherwise informational.
    pub tau: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerParams {
    Weights(WeightParams),
    BatchNorm(BatchNormParams),
    None,
}

/// A network with its parameters; also the serialized training snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub omega_mode: OmegaMode,
    pub params: Vec<LayerParams>,
    #[serde(skip)]
    shapes: Vec<ActShape>,
}

pub type Snapshot = Network;

/// Forward-pass phase for batchnorm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics (and running-stat updates are reported).
    Train,
    /// Running statistics.
    Eval,
}

/// Binarization nonlinearity used in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// Modified sign for weights and activations.
    Binary,
    /// `clip(x, -1, 1)` in place of sign; the backward pass is then its exact
    /// gradient, which makes the STE checkable by finite differences.
    Surrogate,
}

/// Sparsity penalty applied inside a loss evaluation, with `lambda` held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyTerm {
    pub lambda: f64,
    pub ec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Weights { latent: Vec<f64>, bias: Option<Vec<f64>>, tau: f64, phi: f64 },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Flattened in the same order as [`Network::params_mut`].
    pub fn flatten(&self, mode: OmegaMode, spec: &NetworkSpec) -> Vec<f64> {
        let mut out = Vec::new();
        for (g, layer) in self.layers.iter().zip(&spec.layers) {
            match g {
                LayerGrad::Weights { latent, bias, tau, phi } => {
                    out.extend_from_slice(latent);
                    if let Some(b) = bias {
                        out.extend_from_slice(b);
                    }
                    if layer.is_binarized() && mode == OmegaMode::Learned {
                        out.push(*tau);
                        out.push(*phi);
                    }
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

/// Result of one forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub task_loss: f64,
    pub penalty: f64,
    pub total: f64,
    pub logits: Vec<f64>,
    pub grads: Option<Gradients>,
    /// Batch `(mean, unbiased var)` per batchnorm layer, for running stats.
    pub bn_batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

enum Cache {
    Weights { input: Vec<f64>, cols: Vec<Vec<f64>>, w_eff: Vec<f64>, omega: OmegaParams },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Sign { pre: Vec<f64> },
    Pool { argmax: Vec<usize> },
    None,
}

impl Network {
    /// Fresh network with latent weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(spec: NetworkSpec, omega_mode: OmegaMode, seed: u64) -> Result<Self, NetworkError> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            params.push(match *layer {
                LayerSpec::Conv3x3 { in_ch, .. } => {
                    weight_params(&mut rng, layer.weight_count(), in_ch * 9, None, layer.is_binarized())
                }
                LayerSpec::Linear { in_features, .. } => {
                    let out = layer.weight_count() / in_features;
                    let bias = (!layer.is_binarized()).then(|| vec![0.0; out]);
                    weight_params(&mut rng, layer.weight_count(), in_features, bias, layer.is_binarized())
                }
                LayerSpec::Classifier { in_features, out_features } => weight_params(
                    &mut rng,
                    layer.weight_count(),
                    in_features,
                    Some(vec![0.0; out_features]),
                    false,
                ),
                LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm(BatchNormParams {
                    gamma: vec![1.0; channels],
                    beta: vec![0.0; channels],
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                }),
                LayerSpec::SignAct | LayerSpec::Pool => LayerParams::None,
            });
        }
        Ok(Network { spec, omega_mode, params, shapes })
    }

    /// Re-validates after deserialization and restores cached shapes.
    pub fn restore(mut self) -> Result<Self, NetworkError> {
        self.shapes = self.spec.validate()?;
        if self.params.len() != self.spec.layers.len() {
            return Err(NetworkError::Invalid {
                layer: self.params.len(),
                message: "parameter list length differs from layer count".into(),
            });
        }
        for (i, (layer, p)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            let ok = match (layer, p) {
                (LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm(bn)) => {
                    [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .all(|v| v.len() == *channels)
                }
                (LayerSpec::SignAct | LayerSpec::Pool, LayerParams::None) => true,
                (l, LayerParams::Weights(w)) => w.latent.len() == l.weight_count() && l.weight_count() > 0,
                _ => false,
            };
            if !ok {
                return Err(NetworkError::Invalid { layer: i, message: "parameters do not match layer".into() });
            }
        }
        Ok(self)
    }

    pub fn shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    fn input_shape_of(&self, layer: usize) -> ActShape {
        if layer == 0 {
            ActShape::from(self.spec.input)
        } else {
            self.shapes[layer - 1]
        }
    }

    /// The `(tau, phi)` the forward pass uses for a binarized layer.
    pub fn effective_omega(&self, layer: usize) -> OmegaParams {
        let LayerParams::Weights(w) = &self.params[layer] else {
            return OmegaParams::PLUS_MINUS_ONE;
        };
        match self.omega_mode {
            OmegaMode::FixedPm1 => OmegaParams::PLUS_MINUS_ONE,
            OmegaMode::Learned => OmegaParams::new(w.tau, w.phi),
            OmegaMode::Analytic => analytic_omega(&w.latent),
        }
    }

    /// Concatenated signs of all binarized latent weights.
    pub fn binarized_signs(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.spec.binarized_weight_count());
        for (layer, p) in self.spec.layers.iter().zip(&self.params) {
            if let (true, LayerParams::Weights(w)) = (layer.is_binarized(), p) {
                out.extend(w.latent.iter().map(|&v| binquant::sign_of(v)));
            }
        }
        out
    }

    /// `(ones, total)` over binarized weights.
    pub fn ones_count(&self) -> (usize, usize) {
        let signs = self.binarized_signs();
        (signs.iter().filter(|&&s| s == 1).count(), signs.len())
    }

    /// Mutable references to every trainable scalar, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mode = self.omega_mode;
        let mut out = Vec::new();
        for (layer, p) in self.spec.layers.iter().zip(self.params.iter_mut()) {
            match p {
                LayerParams::Weights(w) => {
                    out.extend(w.latent.iter_mut());
                    if let Some(b) = w.bias.as_mut() {
                        out.extend(b.iter_mut());
                    }
                    if layer.is_binarized() && mode == OmegaMode::Learned {
                        out.push(&mut w.tau);
                        out.push(&mut w.phi);
                    }
                }
                LayerParams::BatchNorm(bn) => {
                    out.extend(bn.gamma.iter_mut());
                    out.extend(bn.beta.iter_mut());
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Logits for a batch in eval phase with binary forward.
    pub fn predict_logits(&self, images: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let batch = self.batch_size_of(images)?;
        let (logits, _, _) = self.forward(images, batch, Phase::Eval, Relaxation::Binary, false);
        Ok(logits)
    }

    pub fn predict(&self, images: &[f64]) -> Result<Vec<usize>, NetworkError> {
        let logits = self.predict_logits(images)?;
        Ok(argmax_rows(&logits, self.spec.classes()))
    }

    fn batch_size_of(&self, images: &[f64]) -> Result<usize, NetworkError> {
        let n = self.spec.input.len();
        if images.is_empty() || !images.len().is_multiple_of(n) {
            return Err(NetworkError::ShapeMismatch { expected: n, found: images.len() });
        }
        Ok(images.len() / n)
    }

    /// Cross-entropy (plus optional penalty) and, if requested, gradients.
    pub fn evaluate(
        &self,
        images: &[f64],
        labels: &[usize],
        phase: Phase,
        relax: Relaxation,
        penalty: Option<PenaltyTerm>,
        with_grads: bool,
    ) -> Result<LossEval, NetworkError> {
        let batch = self.batch_size_of(images)?;
        if labels.len() != batch {
            return Err(NetworkError::ShapeMismatch { expected: batch, found: labels.len() });
        }
        let classes = self.spec.classes();
        let (logits, caches, bn_batch_stats) = self.forward(images, batch, phase, relax, true);
        let (task_loss, dlogits) = softmax_cross_entropy(&logits, labels, classes);

        let (penalty_value, penalty_grad) = match penalty {
            Some(term) => {
                let (j, active) = self.surrogate_penalty(term.ec, relax);
                let n = self.spec.binarized_weight_count();
                let g = if active { term.lambda / (2.0 * n as f64) } else { 0.0 };
                (term.lambda * j, g)
            }
            None => (0.0, 0.0),
        };

        let grads = with_grads.then(|| {
            let mut g = self.backward(dlogits, &caches, batch, relax);
            if penalty_grad != 0.0 {
                for (layer, (lg, p)) in self.spec.layers.iter().zip(g.layers.iter_mut().zip(&self.params)) {
                    if let (true, LayerGrad::Weights { latent, .. }, LayerParams::Weights(w)) =
                        (layer.is_binarized(), lg, p)
                    {
                        for (gl, &wl) in latent.iter_mut().zip(&w.latent) {
                            *gl += binquant::ste_gradient(penalty_grad, wl);
                        }
                    }
                }
            }
            g
        });
        Ok(LossEval {
            task_loss,
            penalty: penalty_value,
            total: task_loss + penalty_value,
            logits,
            grads,
            bn_batch_stats,
        })
    }

    /// `j` over binarized weights: the ones fraction for binary relaxation,
    /// `sum((clip(w) + 1) / 2N)` for the surrogate. Returns `(j, active)`.
    fn surrogate_penalty(&self, ec: f64, relax: Relaxation) -> (f64, bool) {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (layer, p) in self.spec.layers.iter().zip(&self.params) {
            if let (true, LayerParams::Weights(w)) = (layer.is_binarized(), p) {
                for &v in &w.latent {
                    acc += match relax {
                        Relaxation::Binary => (binquant::sign_of(v) as f64 + 1.0) / 2.0,
                        Relaxation::Surrogate => (v.clamp(-1.0, 1.0) + 1.0) / 2.0,
                    };
                }
                n += w.latent.len();
            }
        }
        if n == 0 {
            return (0.0, false);
        }
        let j = acc / n as f64 - ec;
        if j > 0.0 {
            (j, true)
        } else {
            (0.0, false)
        }
    }

    fn effective_weights(&self, layer: usize, relax: Relaxation) -> (Vec<f64>, OmegaParams) {
        let LayerParams::Weights(w) = &self.params[layer] else { unreachable!() };
        if !self.spec.layers[layer].is_binarized() {
            return (w.latent.clone(), OmegaParams::PLUS_MINUS_ONE);
        }
        let omega = self.effective_omega(layer);
        let eff = w
            .latent
            .iter()
            .map(|&v| {
                let b = match relax {
                    Relaxation::Binary => binquant::sign_of(v) as f64,
                    Relaxation::Surrogate => v.clamp(-1.0, 1.0),
                };
                omega.tau * b + omega.phi
            })
            .collect();
        (eff, omega)
    }

    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        images: &[f64],
        batch: usize,
        phase: Phase,
        relax: Relaxation,
        keep_cache: bool,
    ) -> (Vec<f64>, Vec<Cache>, Vec<Option<(Vec<f64>, Vec<f64>)>>) {
        let mut x = images.to_vec();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut bn_stats = Vec::with_capacity(self.spec.layers.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = self.input_shape_of(i);
            let out_shape = self.shapes[i];
            let mut stats = None;
            let (y, cache) = match *layer {
                LayerSpec::Conv3x3 { binarized, .. } => {
                    let g = layer.geometry().unwrap();
                    let (w_eff, omega) = self.effective_weights(i, relax);
                    let ActShape::Map { height, width, .. } = in_shape else { unreachable!() };
                    let pad = if binarized { -1.0 } else { 0.0 };
                    let mut y = Vec::with_capacity(batch * out_shape.len());
                    let mut cols = Vec::with_capacity(if keep_cache { batch } else { 0 });
                    for s in 0..batch {
                        let sample = &x[s * in_shape.len()..(s + 1) * in_shape.len()];
                        let (col, oh, ow) = ops::im2col(sample, &g, height, width, pad);
                        y.extend(ops::conv_from_col(&w_eff, &col, g.out_ch, oh * ow));
                        if keep_cache {
                            cols.push(col);
                        }
                    }
                    (y, Cache::Weights { input: Vec::new(), cols, w_eff, omega })
                }
                LayerSpec::Linear { out_features, .. } | LayerSpec::Classifier { out_features, .. } => {
                    let (w_eff, omega) = self.effective_weights(i, relax);
                    let LayerParams::Weights(w) = &self.params[i] else { unreachable!() };
                    let n_in = in_shape.len();
                    let mut y = Vec::with_capacity(batch * out_features);
                    for s in 0..batch {
                        let mut row = ops::matvec(&w_eff, &x[s * n_in..(s + 1) * n_in], out_features);
                        if let Some(b) = &w.bias {
                            for (r, bb) in row.iter_mut().zip(b) {
                                *r += bb;
                            }
                        }
                        y.extend(row);
                    }
                    let input = if keep_cache { x.clone() } else { Vec::new() };
                    (y, Cache::Weights { input, cols: Vec::new(), w_eff, omega })
                }
                LayerSpec::BatchNorm { channels } => {
                    let LayerParams::BatchNorm(bn) = &self.params[i] else { unreachable!() };
                    let plane = in_shape.plane();
                    let per = in_shape.len();
                    let (mean, var) = match phase {
                        Phase::Train => {
                            let (m, v) = channel_moments(&x, batch, channels, plane, per);
                            let count = (batch * plane) as f64;
                            let unbiased = if count > 1.0 {
                                v.iter().map(|&vv| vv * count / (count - 1.0)).collect()
                            } else {
                                v.clone()
                            };
                            stats = Some((m.clone(), unbiased));
                            (m, v)
                        }
                        Phase::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                    let mut xhat = vec![0.0; x.len()];
                    let mut y = vec![0.0; x.len()];
                    for s in 0..batch {
                        for c in 0..channels {
                            let base = s * per + c * plane;
                            for k in base..base + plane {
                                let h = (x[k] - mean[c]) * inv_std[c];
                                xhat[k] = h;
                                y[k] = bn.gamma[c] * h + bn.beta[c];
                            }
                        }
                    }
                    (y, Cache::BatchNorm { xhat, inv_std })
                }
                LayerSpec::SignAct => {
                    let y = x
                        .iter()
                        .map(|&v| match relax {
                            Relaxation::Binary => binquant::sign_of(v) as f64,
                            Relaxation::Surrogate => v.clamp(-1.0, 1.0),
                        })
                        .collect();
                    let pre = if keep_cache { std::mem::take(&mut x) } else { Vec::new() };
                    (y, Cache::Sign { pre })
                }
                LayerSpec::Pool => {
                    let ActShape::Map { channels, height, width } = in_shape else { unreachable!() };
                    let per = in_shape.len();
                    let mut y = Vec::with_capacity(batch * out_shape.len());
                    let mut argmax = Vec::with_capacity(batch * out_shape.len());
                    for s in 0..batch {
                        let (o, a) = ops::maxpool2(&x[s * per..(s + 1) * per], channels, height, width);
                        y.extend(o);
                        argmax.extend(a.into_iter().map(|idx| idx + s * per));
                    }
                    (y, Cache::Pool { argmax })
                }
            };
            bn_stats.push(stats);
            caches.push(if keep_cache { cache } else { Cache::None });
            x = y;
        }
        (x, caches, bn_stats)
    }

    fn backward(&self, dlogits: Vec<f64>, caches: &[Cache], batch: usize, relax: Relaxation) -> Gradients {
        let mut grads: Vec<LayerGrad> = vec![LayerGrad::None; self.spec.layers.len()];
        let mut dy = dlogits;
        for i in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[i];
            let in_shape = self.input_shape_of(i);
            let out_shape = self.shapes[i];
            let mut dx = vec![0.0; batch * in_shape.len()];
            match (&caches[i], layer) {
                (Cache::Weights { cols, w_eff, omega, .. }, LayerSpec::Conv3x3 { .. }) => {
                    let g = layer.geometry().unwrap();
                    let ActShape::Map { height, width, .. } = in_shape else { unreachable!() };
                    let positions = out_shape.plane();
                    let rows = g.fan_in();
                    let mut dw = vec![0.0; w_eff.len()];
                    for s in 0..batch {
                        let dys = &dy[s * out_shape.len()..(s + 1) * out_shape.len()];
                        let col = &cols[s];
                        let mut dcol = vec![0.0; rows * positions];
                        for o in 0..g.out_ch {
                            let dyo = &dys[o * positions..(o + 1) * positions];
                            for r in 0..rows {
                                let colr = &col[r * positions..(r + 1) * positions];
                                dw[o * rows + r] += ops::dot(dyo, colr);
                                let w = w_eff[o * rows + r];
                                for (d, &gy) in dcol[r * positions..(r + 1) * positions].iter_mut().zip(dyo) {
                                    *d += w * gy;
                                }
                            }
                        }
                        ops::col2im(&dcol, &g, height, width, &mut dx[s * in_shape.len()..(s + 1) * in_shape.len()]);
                    }
                    grads[i] = self.weight_grad(i, dw, None, *omega, relax);
                }
                (Cache::Weights { input, w_eff, omega, .. }, _) => {
                    let n_in = in_shape.len();
                    let n_out = out_shape.len();
                    let mut dw = vec![0.0; w_eff.len()];
                    let mut db = vec![0.0; n_out];
                    for s in 0..batch {
                        let xs = &input[s * n_in..(s + 1) * n_in];
                        let dys = &dy[s * n_out..(s + 1) * n_out];
                        let dxs = &mut dx[s * n_in..(s + 1) * n_in];
                        for (o, &g) in dys.iter().enumerate() {
                            db[o] += g;
                            let row = &w_eff[o * n_in..(o + 1) * n_in];
                            for k in 0..n_in {
                                dw[o * n_in + k] += g * xs[k];
                                dxs[k] += g * row[k];
                            }
                        }
                    }
                    let LayerParams::Weights(w) = &self.params[i] else { unreachable!() };
                    let bias = w.bias.as_ref().map(|_| db);
                    grads[i] = self.weight_grad(i, dw, bias, *omega, relax);
                }
                (Cache::BatchNorm { xhat, inv_std }, LayerSpec::BatchNorm { channels }) => {
                    let LayerParams::BatchNorm(bn) = &self.params[i] else { unreachable!() };
                    let plane = in_shape.plane();
                    let per = in_shape.len();
                    let count = (batch * plane) as f64;
                    let mut dgamma = vec![0.0; *channels];
                    let mut dbeta = vec![0.0; *channels];
                    for s in 0..batch {
                        for c in 0..*channels {
                            let base = s * per + c * plane;
                            for k in base..base + plane {
                                dgamma[c] += dy[k] * xhat[k];
                                dbeta[c] += dy[k];
                            }
                        }
                    }
                    // batch-statistics backward; eval-phase caches are never differentiated
                    for s in 0..batch {
                        for c in 0..*channels {
                            let base = s * per + c * plane;
                            let g = bn.gamma[c];
                            for k in base..base + plane {
                                let dxhat = dy[k] * g;
                                dx[k] = inv_std[c] / count
                                    * (count * dxhat - g * dbeta[c] - xhat[k] * g * dgamma[c]);
                            }
                        }
                    }
                    grads[i] = LayerGrad::BatchNorm { gamma: dgamma, beta: dbeta };
                }
                (Cache::Sign { pre }, _) => {
                    for ((d, &g), &p) in dx.iter_mut().zip(&dy).zip(pre) {
                        *d = binquant::ste_gradient(g, p);
                    }
                }
                (Cache::Pool { argmax }, _) => {
                    for (&g, &idx) in dy.iter().zip(argmax) {
                        dx[idx] += g;
                    }
                }
                _ => unreachable!("cache/layer mismatch"),
            }
            dy = dx;
        }
        Gradients { layers: grads }
    }

    fn weight_grad(
        &self,
        layer: usize,
        dw_eff: Vec<f64>,
        bias: Option<Vec<f64>>,
        omega: OmegaParams,
        relax: Relaxation,
    ) -> LayerGrad {
        if !self.spec.layers[layer].is_binarized() {
            return LayerGrad::Weights { latent: dw_eff, bias, tau: 0.0, phi: 0.0 };
        }
        let LayerParams::Weights(w) = &self.params[layer] else { unreachable!() };
        let mut dtau = 0.0;
        let mut dphi = 0.0;
        let latent = dw_eff
            .iter()
            .zip(&w.latent)
            .map(|(&g, &v)| {
                let b = match relax {
                    Relaxation::Binary => binquant::sign_of(v) as f64,
                    Relaxation::Surrogate => v.clamp(-1.0, 1.0),
                };
                dtau += g * b;
                dphi += g;
                binquant::ste_gradient(g * omega.tau, v)
            })
            .collect();
        LayerGrad::Weights { latent, bias, tau: dtau, phi: dphi }
    }
}

/// Closed-form `(tau, phi)` for latent weights, falling back to the constant
/// layer when all signs agree.
pub fn analytic_omega(latent: &[f64]) -> OmegaParams {
    let w = RealWeights::new(latent.to_vec()).expect("latent weights are finite");
    let wb: SignWeights = binquant::sign_binarize(latent).expect("latent weights are finite");
    binquant::fit_omega_or_constant(&w, &wb).map(|f| f.omega).unwrap_or(OmegaParams::PLUS_MINUS_ONE)
}

fn weight_params(
    rng: &mut ChaCha8Rng,
    count: usize,
    fan_in: usize,
    bias: Option<Vec<f64>>,
    binarized: bool,
) -> LayerParams {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let latent: Vec<f64> = (0..count).map(|_| rng.gen_range(-bound..bound)).collect();
    let omega = if binarized { analytic_omega(&latent) } else { OmegaParams::PLUS_MINUS_ONE };
    LayerParams::Weights(WeightParams { latent, bias, tau: omega.tau, phi: omega.phi })
}

fn channel_moments(x: &[f64], batch: usize, channels: usize, plane: usize, per: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let vals = || (0..batch).flat_map(move |s| x[s * per + c * plane..s * per + (c + 1) * plane].iter());
        let m = vals().sum::<f64>() / count;
        mean[c] = m;
        var[c] = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
    }
    (mean, var)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[s * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}

pub fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// `W x` with `W` the `{-1, +1}` (or general two-valued) weight matrix.
pub fn forward_binary_linear(
    weights: &[f64],
    x: &[f64],
    out_features: usize,
) -> Result<Vec<f64>, NetworkError> {
    if out_features == 0 || weights.len() != x.len() * out_features {
        return Err(NetworkError::ShapeMismatch { expected: x.len() * out_features, found: weights.len() });
    }
    Ok(ops::matvec(weights, x, out_features))
}

/// 3x3 convolution of one `C x H x W` map over `{-1, +1}` activations; the
/// padding halo reads -1.
pub fn forward_binary_conv(
    x: &[f64],
    weights: &[f64],
    geometry: Conv3x3,
    height: usize,
    width: usize,
) -> Result<Vec<f64>, NetworkError> {
    if x.len() != geometry.in_ch * height * width {
        return Err(NetworkError::ShapeMismatch { expected: geometry.in_ch * height * width, found: x.len() });
    }
    if weights.len() != geometry.weight_count() {
        return Err(NetworkError::ShapeMismatch { expected: geometry.weight_count(), found: weights.len() });
    }
    if geometry.output_dims(height, width).is_none() {
        return Err(NetworkError::Invalid { layer: 0, message: "input smaller than the 3x3 window".into() });
    }
    Ok(ops::conv3x3(x, weights, &geometry, height, width, -1.0).0)
}
