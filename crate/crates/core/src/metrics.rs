//! Compression and operation accounting.
//!
//! Conventions:
//! * FLOPs: one real multiply-accumulate is 2 FLOPs. Batchnorm is folded and
//!   free; binarized layers cost no FLOPs once thresholds are fused.
//! * BOPs: one XNOR plus one popcount per weight position, so a dense
//!   binarized layer costs `2 * MACs`. The sparse engine counts only the
//!   executed positions.
//! * BParams: each 3x3 kernel costs a 2-bit class code, plus 4 bits of index
//!   for Hamming weight 1 or 9 raw bits for heavier kernels. Binarized linear
//!   layers store 1 bit per weight.

use std::fmt::Write as _;

use crate::infer::{classify_kernels, KernelClass, OpsCounters};
use crate::model::{ActShape, ModelError, QLayer, QuantizedModel};
use crate::sparsity::binary_entropy;

/// Ratio of real FLOPs to one packed binary operation word.
pub const BOPS_PER_FLOP: f64 = 64.0;

/// `2 * MACs` of a binarized layer on input `shape`; 0 for other layers.
pub fn bops_baseline(layer: &QLayer, shape: ActShape) -> u64 {
    match layer {
        QLayer::BinConv { geometry, .. } => {
            let ActShape::Map { height, width, .. } = shape else { return 0 };
            let (oh, ow) = geometry.output_dims(height, width).unwrap_or((0, 0));
            2 * (geometry.weight_count() * oh * ow) as u64
        }
        QLayer::BinLinear { bits, .. } => 2 * bits.len() as u64,
        _ => 0,
    }
}

/// `2 * MACs` of a real conv or linear layer; 0 otherwise.
pub fn flops(layer: &QLayer, shape: ActShape) -> u64 {
    match layer {
        QLayer::RealConv { geometry, .. } => {
            let ActShape::Map { height, width, .. } = shape else { return 0 };
            let (oh, ow) = geometry.output_dims(height, width).unwrap_or((0, 0));
            2 * (geometry.weight_count() * oh * ow) as u64
        }
        QLayer::RealLinear { weights, .. } => 2 * weights.len() as u64,
        _ => 0,
    }
}

/// Reciprocal speed-up estimate `2 / ec` of a sparse layer over a dense one.
pub fn gain_estimate(ec: f64) -> Option<f64> {
    (ec > 0.0 && ec <= 1.0).then(|| 2.0 / ec)
}

pub fn ops_total(bops: f64, flops: f64) -> f64 {
    flops + bops / BOPS_PER_FLOP
}

/// Bits to store a kernel-class mix.
pub fn bparams_bits_from_counts(zero: usize, single: usize, dense: usize) -> u64 {
    (2 * (zero + single + dense) + 4 * single + 9 * dense) as u64
}

pub fn bparams_bits_for_classes(classes: &[KernelClass]) -> u64 {
    classes
        .iter()
        .map(|c| match c {
            KernelClass::Zero => 2,
            KernelClass::Single(_) => 6,
            KernelClass::Dense(_) => 11,
        })
        .sum()
}

/// Payload bits of one layer; 0 for non-binarized layers.
pub fn layer_bparams_bits(layer: &QLayer) -> u64 {
    match layer {
        QLayer::BinConv { bits, .. } => {
            bparams_bits_for_classes(&classify_kernels(bits).expect("conv bits split into kernels").classes)
        }
        QLayer::BinLinear { bits, .. } => bits.len() as u64,
        _ => 0,
    }
}

pub fn bparams_bits(model: &QuantizedModel) -> u64 {
    model.layers.iter().map(layer_bparams_bits).sum()
}

/// `1 - counted / baseline`, clamped to `[0, 1]`; 0 for an empty baseline.
pub fn bops_pruning_ratio(counted: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    (1.0 - counted as f64 / baseline as f64).clamp(0.0, 1.0)
}

/// Fractions of 3x3 kernels at each Hamming weight `0..=9` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HammingHistogram {
    pub layer: usize,
    pub counts: [u64; 10],
}

impl HammingHistogram {
    pub fn from_bits(layer: usize, bits: &[u8]) -> Self {
        let mut counts = [0u64; 10];
        for k in bits.chunks_exact(9) {
            counts[k.iter().filter(|&&b| b != 0).count()] += 1;
        }
        Self { layer, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> [f64; 10] {
        let total = self.total().max(1) as f64;
        self.counts.map(|c| c as f64 / total)
    }
}

/// One histogram per binarized conv layer.
pub fn hamming_histogram(model: &QuantizedModel) -> Vec<HammingHistogram> {
    model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            QLayer::BinConv { bits, .. } => Some(HammingHistogram::from_bits(i, bits)),
            _ => None,
        })
        .collect()
}

/// CSV with header `layer,w0,...,w9`, fractions per row.
pub fn histogram_csv(hists: &[HammingHistogram]) -> String {
    let mut s = String::from("layer");
    for w in 0..10 {
        let _ = write!(s, ",w{w}");
    }
    s.push('\n');
    for h in hists {
        let _ = write!(s, "{}", h.layer);
        for f in h.fractions() {
            let _ = write!(s, ",{f:.6}");
        }
        s.push('\n');
    }
    s
}

/// Accounting of one layer, or of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub label: String,
    pub bops_bnn: u64,
    pub bops_sbnn: u64,
    pub flops: u64,
    pub kernels: usize,
    pub k0: usize,
    pub k1: usize,
    pub kdense: usize,
    pub bparams_bits: u64,
    pub binarized_weights: usize,
    pub ones: usize,
}

impl LayerReport {
    fn empty(label: String) -> Self {
        Self {
            label,
            bops_bnn: 0,
            bops_sbnn: 0,
            flops: 0,
            kernels: 0,
            k0: 0,
            k1: 0,
            kdense: 0,
            bparams_bits: 0,
            binarized_weights: 0,
            ones: 0,
        }
    }

    pub fn ops_total(&self) -> f64 {
        ops_total(self.bops_sbnn as f64, self.flops as f64)
    }

    pub fn bops_pr(&self) -> f64 {
        bops_pruning_ratio(self.bops_sbnn, self.bops_bnn)
    }

    fn fraction(count: usize, of: usize) -> f64 {
        if of == 0 {
            0.0
        } else {
            count as f64 / of as f64
        }
    }

    pub fn k0_fraction(&self) -> f64 {
        Self::fraction(self.k0, self.kernels)
    }

    pub fn k1_fraction(&self) -> f64 {
        Self::fraction(self.k1, self.kernels)
    }

    pub fn kdense_fraction(&self) -> f64 {
        Self::fraction(self.kdense, self.kernels)
    }

    /// `1 - bits / N`, with 1 bit per weight as the dense baseline.
    pub fn bparams_pr(&self) -> f64 {
        if self.binarized_weights == 0 {
            0.0
        } else {
            1.0 - self.bparams_bits as f64 / self.binarized_weights as f64
        }
    }

    pub fn ones_fraction(&self) -> f64 {
        Self::fraction(self.ones, self.binarized_weights)
    }

    pub fn entropy_bits(&self) -> f64 {
        binary_entropy(self.ones_fraction()).unwrap_or(0.0)
    }

    fn absorb(&mut self, o: &LayerReport) {
        self.bops_bnn += o.bops_bnn;
        self.bops_sbnn += o.bops_sbnn;
        self.flops += o.flops;
        self.kernels += o.kernels;
        self.k0 += o.k0;
        self.k1 += o.k1;
        self.kdense += o.kdense;
        self.bparams_bits += o.bparams_bits;
        self.binarized_weights += o.binarized_weights;
        self.ones += o.ones;
    }

    /// One `key=value` line of the report schema.
    pub fn line(&self) -> String {
        format!(
            "{} bops_bnn={} bops_sbnn={} flops={} ops_total={:.3} bops_pr={:.6} k0={:.6} k1={:.6} kdense={:.6} \
             bparams_bits={} bparams_pr={:.6} ones_fraction={:.6} entropy_bits={:.6}",
            self.label,
            self.bops_bnn,
            self.bops_sbnn,
            self.flops,
            self.ops_total(),
            self.bops_pr(),
            self.k0_fraction(),
            self.k1_fraction(),
            self.kdense_fraction(),
            self.bparams_bits,
            self.bparams_pr(),
            self.ones_fraction(),
            self.entropy_bits(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpsReport {
    pub layers: Vec<LayerReport>,
    pub total: LayerReport,
}

impl OpsReport {
    /// Builds the report from the per-layer counters of a single inference.
    pub fn build(model: &QuantizedModel, counters: &[OpsCounters]) -> Result<Self, ModelError> {
        let input = model.input.ok_or(ModelError::MissingInput)?;
        let shapes = model.input_shapes(input)?;
        let mut total = LayerReport::empty("total".into());
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let mut r = LayerReport::empty(format!("layer={i} kind={}", layer.name()));
            r.bops_bnn = bops_baseline(layer, shapes[i]);
            r.flops = flops(layer, shapes[i]);
            if let Some(c) = counters.get(i) {
                r.bops_sbnn = c.bops;
            }
            if let QLayer::BinConv { bits, .. } = layer {
                let s = classify_kernels(bits).expect("conv bits split into kernels");
                (r.kernels, r.k0, r.k1, r.kdense) = (s.total(), s.zero, s.single, s.dense);
            }
            if let Some(bits) = layer.bits() {
                r.bparams_bits = layer_bparams_bits(layer);
                r.binarized_weights = bits.len();
                r.ones = bits.iter().filter(|&&b| b == 1).count();
            }
            total.absorb(&r);
            layers.push(r);
        }
        Ok(Self { layers, total })
    }

    /// Plain-text report: one line per layer, then the total and the
    /// expected gain `2 / ec` at the model's ones-fraction.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&l.line());
            s.push('\n');
        }
        s.push_str(&self.total.line());
        s.push('\n');
        match gain_estimate(self.total.ones_fraction()) {
            Some(g) => {
                let _ = writeln!(s, "gain_estimate={g:.6}");
            }
            None => s.push_str("gain_estimate=none\n"),
        }
        s
    }
}
