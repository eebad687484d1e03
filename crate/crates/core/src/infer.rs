//! Bit-packed `{0, 1}` inference.
//!
//! Activations are encoded `+1 -> 1`, `-1 -> 0`. For a binarized layer with
//! one-valued weight set `S1` the engine computes
//!
//! * `z' = sum_{i in S1} x_i = 2 * popcount(x & w) - popcount(w)`
//! * `q  = sum_i x_i = 2 * popcount(x) - |x|`, once per input row
//!
//! and recovers the real pre-activation as `z = eta * z' + alpha * q`. The
//! batchnorm and sign that follow are folded into a precomputed integer
//! threshold on `z'` per output channel and per value of `q`, so binarized
//! layers run without floating point at all.
//!
//! 3x3 kernels are classified by Hamming weight: weight-0 kernels are skipped,
//! weight-1 kernels read a single input bit, the rest use one popcount over the
//! 9-bit window.

use std::ops::AddAssign;

use thiserror::Error;

use crate::binquant::OmegaParams;
use crate::dataio::ImageShape;
use crate::model::{conv_input_coord, ActShape, Conv3x3, FoldedBatchNorm, ModelError, QLayer, QuantizedModel};
use crate::nn::ops;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("packed lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0} weights do not split into 3x3 kernels")]
    NotKernels(usize),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Bits packed little-endian into `u64` words; bits past `len` are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBits {
    words: Vec<u64>,
    len: usize,
}

impl PackedBits {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, index: usize) -> bool {
        index < self.len && (self.words[index / 64] >> (index % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }
}

/// Packs a `{0, 1}` vector; any nonzero byte counts as 1.
pub fn pack(bits: &[u8]) -> PackedBits {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    PackedBits { words, len: bits.len() }
}

/// `sum_{i : w_i = 1} x_i` for `x` in `{-1, +1}` encoded as bits.
pub fn popcount_dot(x: &PackedBits, w: &PackedBits) -> Result<i64> {
    if x.len != w.len {
        return Err(InferError::LengthMismatch { left: x.len, right: w.len });
    }
    let both: u32 = x.words.iter().zip(&w.words).map(|(a, b)| (a & b).count_ones()).sum();
    Ok(2 * both as i64 - w.count_ones() as i64)
}

/// `sum_i x_i` for `x` in `{-1, +1}` encoded as bits.
pub fn q_compute(x: &PackedBits) -> i64 {
    2 * x.count_ones() as i64 - x.len as i64
}

/// `eta * z' + alpha * q`, the dense `sum w_i x_i` with `w_i` in `{alpha, beta}`.
#[inline]
pub fn affine_remap(z_prime: i64, q: i64, omega: OmegaParams) -> f64 {
    omega.eta() * z_prime as f64 + omega.alpha() * q as f64
}

/// A 3x3 `{0, 1}` kernel classified by Hamming weight. Bit `k` of a pattern
/// is kernel position `k = ky * 3 + kx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelClass {
    Zero,
    Single(u8),
    Dense(u16),
}

impl KernelClass {
    pub fn from_pattern(pattern: u16) -> Self {
        let pattern = pattern & 0x1ff;
        match pattern.count_ones() {
            0 => KernelClass::Zero,
            1 => KernelClass::Single(pattern.trailing_zeros() as u8),
            _ => KernelClass::Dense(pattern),
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self::from_pattern(kernel_pattern(bits))
    }

    pub fn pattern(&self) -> u16 {
        match *self {
            KernelClass::Zero => 0,
            KernelClass::Single(i) => 1 << i,
            KernelClass::Dense(p) => p,
        }
    }

    pub fn hamming_weight(&self) -> u32 {
        self.pattern().count_ones()
    }
}

/// Nine `{0, 1}` values to a 9-bit pattern.
pub fn kernel_pattern(bits: &[u8]) -> u16 {
    bits.iter().take(9).enumerate().fold(0u16, |p, (k, &b)| p | (((b != 0) as u16) << k))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSummary {
    pub classes: Vec<KernelClass>,
    pub zero: usize,
    pub single: usize,
    pub dense: usize,
}

impl KernelSummary {
    pub fn total(&self) -> usize {
        self.classes.len()
    }
}

/// Splits a layer's bits into consecutive 3x3 kernels and classifies them.
pub fn classify_kernels(bits: &[u8]) -> Result<KernelSummary> {
    if !bits.len().is_multiple_of(9) {
        return Err(InferError::NotKernels(bits.len()));
    }
    let classes: Vec<KernelClass> = bits.chunks_exact(9).map(KernelClass::from_bits).collect();
    let count = |f: fn(&KernelClass) -> bool| classes.iter().filter(|c| f(c)).count();
    Ok(KernelSummary {
        zero: count(|c| matches!(c, KernelClass::Zero)),
        single: count(|c| matches!(c, KernelClass::Single(_))),
        dense: count(|c| matches!(c, KernelClass::Dense(_))),
        classes,
    })
}

/// Direction of the fused comparison on `z'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Output is +1 iff `z' >= threshold`.
    AtLeast,
    /// Output is +1 iff `z' <= threshold`.
    AtMost,
}

/// Batchnorm-then-sign folded into integer comparisons for one output channel.
///
/// The threshold depends on `q`, which takes the `fan_in + 1` values
/// `-fan_in, -fan_in + 2, ..., fan_in`; one entry is stored per value.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedThreshold {
    pub orientation: Orientation,
    pub fan_in: usize,
    pub thresholds: Vec<i64>,
}

impl FusedThreshold {
    /// Builds the table so that `decide(z', q)` equals
    /// `bn.sign_decision(channel, affine_remap(z', q, omega))` for every
    /// `|z'| <= fan_in` and every attainable `q`.
    pub fn build(omega: OmegaParams, bn: &FoldedBatchNorm, channel: usize, fan_in: usize) -> Self {
        let decision = |zp: i64, q: i64| bn.sign_decision(channel, affine_remap(zp, q, omega));
        let n = fan_in as i64;
        let orientation = if omega.eta() * bn.scale[channel] >= 0.0 {
            Orientation::AtLeast
        } else {
            Orientation::AtMost
        };
        let thresholds = (0..=n)
            .map(|k| {
                let q = 2 * k - n;
                match orientation {
                    // smallest z' in [-n, n] that decides +1, else n + 1
                    Orientation::AtLeast => {
                        let (mut lo, mut hi) = (-n, n + 1);
                        while lo < hi {
                            let mid = lo + (hi - lo) / 2;
                            if decision(mid, q) {
                                hi = mid;
                            } else {
                                lo = mid + 1;
                            }
                        }
                        lo
                    }
                    // largest z' in [-n, n] that decides +1, else -n - 1
                    Orientation::AtMost => {
                        let (mut lo, mut hi) = (-n - 1, n);
                        while lo < hi {
                            let mid = hi - (hi - lo) / 2;
                            if decision(mid, q) {
                                lo = mid;
                            } else {
                                hi = mid - 1;
                            }
                        }
                        lo
                    }
                }
            })
            .collect();
        Self { orientation, fan_in, thresholds }
    }

    #[inline]
    pub fn decide(&self, z_prime: i64, q: i64) -> bool {
        let t = self.thresholds[((q + self.fan_in as i64) / 2) as usize];
        match self.orientation {
            Orientation::AtLeast => z_prime >= t,
            Orientation::AtMost => z_prime <= t,
        }
    }
}

/// Operation counts for one inference, per layer or summed.
///
/// `bops` follows the kernel-skipping convention: a dense 3x3 kernel costs
/// one XNOR and one popcount per weight position, weight-0 and weight-1
/// kernels cost nothing. `connected_bops` counts only the one-valued
/// positions, the cost on hardware that can skip every zero weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpsCounters {
    pub bops: u64,
    pub connected_bops: u64,
    pub popcounts: u64,
    pub gathers: u64,
    pub skipped_kernels: u64,
    pub dense_kernels: u64,
    pub flops: u64,
}

impl AddAssign for OpsCounters {
    fn add_assign(&mut self, o: Self) {
        self.bops += o.bops;
        self.connected_bops += o.connected_bops;
        self.popcounts += o.popcounts;
        self.gathers += o.gathers;
        self.skipped_kernels += o.skipped_kernels;
        self.dense_kernels += o.dense_kernels;
        self.flops += o.flops;
    }
}

impl std::iter::Sum for OpsCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = OpsCounters::default();
        for c in iter {
            total += c;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// Take the skip / gather fast paths for weight-0 and weight-1 kernels.
    /// With `false` every kernel goes through the popcount path.
    pub skip_sparse_kernels: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { skip_sparse_kernels: true }
    }
}

#[derive(Debug, Clone)]
enum Compiled {
    Passthrough,
    BinConv { geometry: Conv3x3, kernels: Vec<KernelClass>, fused: Vec<FusedThreshold> },
    BinLinear { rows: Vec<PackedBits>, fused: Vec<FusedThreshold> },
}

#[derive(Debug, Clone)]
enum Act {
    Real(Vec<f64>),
    Bits(Vec<u8>),
}

impl Act {
    fn into_real(self) -> Vec<f64> {
        match self {
            Act::Real(v) => v,
            Act::Bits(b) => b.into_iter().map(|x| if x == 1 { 1.0 } else { -1.0 }).collect(),
        }
    }
}

/// Integer pre-activations of one binarized layer: `z'` laid out
/// `[out_channel][position]` and `q` per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preactivations {
    pub layer: usize,
    pub z_prime: Vec<i64>,
    pub q: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub logits: Vec<f64>,
    /// One entry per model layer.
    pub counters: Vec<OpsCounters>,
}

impl InferOutput {
    pub fn total(&self) -> OpsCounters {
        self.counters.iter().copied().sum()
    }
}

/// A quantized model compiled for bit-packed execution. Immutable after
/// construction and shareable across threads.
#[derive(Debug, Clone)]
pub struct SparseEngine {
    model: QuantizedModel,
    input: ImageShape,
    in_shapes: Vec<ActShape>,
    compiled: Vec<Compiled>,
    options: EngineOptions,
}

impl SparseEngine {
    pub fn new(model: QuantizedModel) -> Result<Self> {
        Self::with_options(model, EngineOptions::default())
    }

    pub fn with_options(model: QuantizedModel, options: EngineOptions) -> Result<Self> {
        let input = model.input.ok_or(ModelError::MissingInput)?;
        let in_shapes = model.input_shapes(input)?;
        let compiled = model
            .layers
            .iter()
            .map(|layer| match layer {
                QLayer::BinConv { geometry, omega, bits, bn } => {
                    let kernels = classify_kernels(bits)?.classes;
                    let fused = (0..geometry.out_ch)
                        .map(|o| FusedThreshold::build(*omega, bn, o, geometry.fan_in()))
                        .collect();
                    Ok(Compiled::BinConv { geometry: *geometry, kernels, fused })
                }
                QLayer::BinLinear { in_features, out_features, omega, bits, bn } => {
                    let rows = bits.chunks_exact(*in_features).map(pack).collect();
                    let fused = (0..*out_features)
                        .map(|o| FusedThreshold::build(*omega, bn, o, *in_features))
                        .collect();
                    Ok(Compiled::BinLinear { rows, fused })
                }
                _ => Ok(Compiled::Passthrough),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, input, in_shapes, compiled, options })
    }

    pub fn model(&self) -> &QuantizedModel {
        &self.model
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn infer(&self, input: &[f64]) -> Result<InferOutput> {
        self.run(input, None)
    }

    /// Like [`infer`](Self::infer), also returning the integer
    /// pre-activations of every binarized layer.
    pub fn infer_traced(&self, input: &[f64]) -> Result<(InferOutput, Vec<Preactivations>)> {
        let mut trace = Vec::new();
        let out = self.run(input, Some(&mut trace))?;
        Ok((out, trace))
    }

    /// Runs a contiguous batch on up to `threads` workers. Results keep input
    /// order; counters are summed over the batch.
    pub fn infer_batch(&self, inputs: &[f64], threads: usize) -> Result<(Vec<Vec<f64>>, Vec<OpsCounters>)> {
        let n = self.input.len();
        if !inputs.len().is_multiple_of(n) {
            return Err(ModelError::InputSize { expected: n, found: inputs.len() % n }.into());
        }
        let samples: Vec<&[f64]> = inputs.chunks_exact(n).collect();
        let threads = threads.clamp(1, samples.len().max(1));
        let per = samples.len().div_ceil(threads).max(1);
        let outputs: Vec<Result<Vec<InferOutput>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(per)
                .map(|chunk| scope.spawn(move || chunk.iter().map(|s| self.infer(s)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
        });
        let mut logits = Vec::with_capacity(samples.len());
        let mut counters = vec![OpsCounters::default(); self.model.layers.len()];
        for chunk in outputs {
            for out in chunk? {
                for (acc, c) in counters.iter_mut().zip(&out.counters) {
                    *acc += *c;
                }
                logits.push(out.logits);
            }
        }
        Ok((logits, counters))
    }

    fn run(&self, input: &[f64], mut trace: Option<&mut Vec<Preactivations>>) -> Result<InferOutput> {
        if input.len() != self.input.len() {
            return Err(ModelError::InputSize { expected: self.input.len(), found: input.len() }.into());
        }
        let mut act = Act::Real(input.to_vec());
        let mut counters = Vec::with_capacity(self.model.layers.len());
        for (i, (layer, compiled)) in self.model.layers.iter().zip(&self.compiled).enumerate() {
            let shape = self.in_shapes[i];
            let mut c = OpsCounters::default();
            act = match (layer, compiled) {
                (QLayer::RealConv { geometry, weights }, _) => {
                    let ActShape::Map { height, width, .. } = shape else { unreachable!() };
                    let (y, oh, ow) = ops::conv3x3(&act.into_real(), weights, geometry, height, width, 0.0);
                    c.flops = 2 * (geometry.weight_count() * oh * ow) as u64;
                    Act::Real(y)
                }
                (QLayer::RealLinear { out_features, weights, bias, .. }, _) => {
                    let mut y = ops::matvec(weights, &act.into_real(), *out_features);
                    for (v, b) in y.iter_mut().zip(bias) {
                        *v += b;
                    }
                    c.flops = 2 * weights.len() as u64;
                    Act::Real(y)
                }
                (QLayer::BatchNorm(bn), _) => {
                    let plane = shape.plane();
                    let x = act.into_real();
                    Act::Real(x.iter().enumerate().map(|(k, &v)| bn.apply(k / plane, v)).collect())
                }
                (QLayer::Sign, _) => match act {
                    Act::Real(x) => Act::Bits(x.iter().map(|&v| (v >= 0.0) as u8).collect()),
                    bits @ Act::Bits(_) => bits,
                },
                (QLayer::MaxPool2, _) => {
                    let ActShape::Map { channels, height, width } = shape else { unreachable!() };
                    match act {
                        Act::Real(x) => Act::Real(ops::maxpool2(&x, channels, height, width).0),
                        Act::Bits(b) => Act::Bits(pool_bits(&b, channels, height, width)),
                    }
                }
                (QLayer::BinConv { .. }, Compiled::BinConv { geometry, kernels, fused }) => {
                    let Act::Bits(bits) = act else {
                        return Err(ModelError::Domain { layer: i }.into());
                    };
                    let (out, pre) = self.bin_conv(&bits, shape, geometry, kernels, fused, &mut c);
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(Preactivations { layer: i, z_prime: pre.0, q: pre.1 });
                    }
                    Act::Bits(out)
                }
                (QLayer::BinLinear { .. }, Compiled::BinLinear { rows, fused }) => {
                    let Act::Bits(bits) = act else {
                        return Err(ModelError::Domain { layer: i }.into());
                    };
                    let (out, pre) = self.bin_linear(&bits, rows, fused, &mut c);
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(Preactivations { layer: i, z_prime: pre.0, q: pre.1 });
                    }
                    Act::Bits(out)
                }
                _ => unreachable!("compiled layer mismatch"),
            };
            counters.push(c);
        }
        Ok(InferOutput { logits: act.into_real(), counters })
    }

    #[allow(clippy::type_complexity)]
    fn bin_conv(
        &self,
        bits: &[u8],
        shape: ActShape,
        g: &Conv3x3,
        kernels: &[KernelClass],
        fused: &[FusedThreshold],
        c: &mut OpsCounters,
    ) -> (Vec<u8>, (Vec<i64>, Vec<i64>)) {
        let ActShape::Map { height, width, .. } = shape else { unreachable!() };
        let (oh, ow) = g.output_dims(height, width).expect("validated geometry");
        let positions = oh * ow;
        let mut out = vec![0u8; g.out_ch * positions];
        let mut z_all = vec![0i64; g.out_ch * positions];
        let mut q_all = vec![0i64; positions];
        let mut codes = vec![0u16; g.in_ch];
        for y in 0..oh {
            for x in 0..ow {
                let p = y * ow + x;
                for (ci, code) in codes.iter_mut().enumerate() {
                    let plane = &bits[ci * height * width..(ci + 1) * height * width];
                    *code = (0..9).fold(0u16, |acc, k| match conv_input_coord(g, height, width, y, x, k) {
                        Some((iy, ix)) => acc | ((plane[iy * width + ix] as u16) << k),
                        None => acc,
                    });
                }
                let q: i64 = codes.iter().map(|&w| 2 * w.count_ones() as i64 - 9).sum();
                c.popcounts += g.in_ch as u64;
                q_all[p] = q;
                for o in 0..g.out_ch {
                    let mut zp = 0i64;
                    for (ci, &code) in codes.iter().enumerate() {
                        let kernel = kernels[o * g.in_ch + ci];
                        match (self.options.skip_sparse_kernels, kernel) {
                            (true, KernelClass::Zero) => c.skipped_kernels += 1,
                            (true, KernelClass::Single(idx)) => {
                                zp += if (code >> idx) & 1 == 1 { 1 } else { -1 };
                                c.gathers += 1;
                                c.connected_bops += 1;
                            }
                            (_, k) => {
                                let pat = k.pattern();
                                zp += 2 * (code & pat).count_ones() as i64 - pat.count_ones() as i64;
                                c.popcounts += 1;
                                c.dense_kernels += 1;
                                c.bops += 18;
                                c.connected_bops += pat.count_ones() as u64;
                            }
                        }
                    }
                    z_all[o * positions + p] = zp;
                    out[o * positions + p] = fused[o].decide(zp, q) as u8;
                }
            }
        }
        (out, (z_all, q_all))
    }

    fn bin_linear(
        &self,
        bits: &[u8],
        rows: &[PackedBits],
        fused: &[FusedThreshold],
        c: &mut OpsCounters,
    ) -> (Vec<u8>, (Vec<i64>, Vec<i64>)) {
        let x = pack(bits);
        let q = q_compute(&x);
        c.popcounts += x.words().len() as u64;
        let mut out = Vec::with_capacity(rows.len());
        let mut z_all = Vec::with_capacity(rows.len());
        for (row, th) in rows.iter().zip(fused) {
            let ones = row.count_ones();
            let zp = if ones == 0 && self.options.skip_sparse_kernels {
                c.skipped_kernels += 1;
                0
            } else {
                c.popcounts += row.words().len() as u64;
                c.dense_kernels += 1;
                c.bops += 2 * row.len() as u64;
                c.connected_bops += ones as u64;
                popcount_dot(&x, row).expect("row length matches input")
            };
            z_all.push(zp);
            out.push(th.decide(zp, q) as u8);
        }
        (out, (z_all, vec![q]))
    }
}

/// 2x2 max pool over `{-1, +1}` bits, i.e. OR of the window.
fn pool_bits(bits: &[u8], channels: usize, height: usize, width: usize) -> Vec<u8> {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &bits[c * height * width..(c + 1) * height * width];
        for y in 0..oh {
            for x in 0..ow {
                let at = |dy: usize, dx: usize| plane[(2 * y + dy) * width + 2 * x + dx];
                out.push(at(0, 0) | at(0, 1) | at(1, 0) | at(1, 1));
            }
        }
    }
    out
}

/// Convenience wrapper: compile and run one sample.
pub fn infer(model: &QuantizedModel, input: &[f64]) -> Result<InferOutput> {
    SparseEngine::new(model.clone())?.infer(input)
}
