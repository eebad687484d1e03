//! Quantized model description shared by the trainer, the inference engine,
//! the accounting code and the file format.

use thiserror::Error;

use crate::binquant::OmegaParams;
use crate::dataio::ImageShape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },
    #[error("layer {layer}: binarized layer needs a {{-1, +1}} input")]
    Domain { layer: usize },
    #[error("input has {found} values, model expects {expected}")]
    InputSize { expected: usize, found: usize },
    #[error("model declares no input shape")]
    MissingInput,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Map { channels, height, width } => channels * height * width,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of batchnorm channels: feature maps normalize per channel,
    /// flat vectors per feature.
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { channels, .. } => channels,
            ActShape::Flat(n) => n,
        }
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        match *self {
            ActShape::Map { height, width, .. } => height * width,
            ActShape::Flat(_) => 1,
        }
    }
}

impl From<ImageShape> for ActShape {
    fn from(s: ImageShape) -> Self {
        ActShape::Map { channels: s.channels, height: s.height, width: s.width }
    }
}

/// Whether activations are arbitrary reals or `{-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Real,
    Binary,
}

/// Geometry of a 3x3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3x3 {
    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }

    pub fn kernel_count(&self) -> usize {
        self.out_ch * self.in_ch
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * 9
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let dim = |n: usize| {
            let padded = n + 2 * self.padding;
            (padded >= 3 && self.stride > 0).then(|| (padded - 3) / self.stride + 1)
        };
        Some((dim(height)?, dim(width)?))
    }

    /// Output shape for an input map, validating the channel count.
    pub fn output_shape(&self, input: ActShape) -> std::result::Result<ActShape, String> {
        match input {
            ActShape::Map { channels, height, width } if channels == self.in_ch => {
                let (h, w) = self
                    .output_dims(height, width)
                    .ok_or_else(|| format!("input {height}x{width} too small for 3x3 window"))?;
                Ok(ActShape::Map { channels: self.out_ch, height: h, width: w })
            }
            other => Err(format!("conv expects {} input channels, got {:?}", self.in_ch, other)),
        }
    }
}

/// Pool output shape (2x2 window, stride 2, floor).
pub fn pool_output_shape(input: ActShape) -> std::result::Result<ActShape, String> {
    match input {
        ActShape::Map { channels, height, width } if height >= 2 && width >= 2 => {
            Ok(ActShape::Map { channels, height: height / 2, width: width / 2 })
        }
        other => Err(format!("2x2 pool needs a map of at least 2x2, got {other:?}")),
    }
}

/// Batchnorm folded for inference: `y = z * scale + bias` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedBatchNorm {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FoldedBatchNorm {
    pub fn from_stats(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Self {
        let scale: Vec<f64> =
            gamma.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
        let bias = beta.iter().zip(mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        Self { scale, bias }
    }

    pub fn identity(channels: usize) -> Self {
        Self { scale: vec![1.0; channels], bias: vec![0.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    #[inline]
    pub fn apply(&self, channel: usize, z: f64) -> f64 {
        z * self.scale[channel] + self.bias[channel]
    }

    /// Batchnorm followed by the modified sign, as a decision `y >= 0`.
    #[inline]
    pub fn sign_decision(&self, channel: usize, z: f64) -> bool {
        self.apply(channel, z) >= 0.0
    }
}

/// One layer of a quantized model.
#[derive(Debug, Clone, PartialEq)]
pub enum QLayer {
    /// Full-precision 3x3 convolution (zero padding, no bias).
    RealConv { geometry: Conv3x3, weights: Vec<f64> },
    /// Full-precision fully connected layer with bias; flattens map inputs.
    RealLinear { in_features: usize, out_features: usize, weights: Vec<f64>, bias: Vec<f64> },
    BatchNorm(FoldedBatchNorm),
    Sign,
    MaxPool2,
    /// Binarized 3x3 convolution fused with its batchnorm and sign.
    /// `bits` is laid out `[out][in][ky * 3 + kx]`; padding reads as -1.
    BinConv { geometry: Conv3x3, omega: OmegaParams, bits: Vec<u8>, bn: FoldedBatchNorm },
    /// Binarized fully connected layer fused with its batchnorm and sign.
    BinLinear {
        in_features: usize,
        out_features: usize,
        omega: OmegaParams,
        bits: Vec<u8>,
        bn: FoldedBatchNorm,
    },
}

impl QLayer {
    pub fn is_binarized(&self) -> bool {
        matches!(self, QLayer::BinConv { .. } | QLayer::BinLinear { .. })
    }

    pub fn bits(&self) -> Option<&[u8]> {
        match self {
            QLayer::BinConv { bits, .. } | QLayer::BinLinear { bits, .. } => Some(bits),
            _ => None,
        }
    }

    pub fn omega(&self) -> Option<OmegaParams> {
        match self {
            QLayer::BinConv { omega, .. } | QLayer::BinLinear { omega, .. } => Some(*omega),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QLayer::RealConv { .. } => "real_conv3x3",
            QLayer::RealLinear { .. } => "real_linear",
            QLayer::BatchNorm(_) => "batchnorm",
            QLayer::Sign => "sign",
            QLayer::MaxPool2 => "maxpool2",
            QLayer::BinConv { .. } => "bin_conv3x3",
            QLayer::BinLinear { .. } => "bin_linear",
        }
    }

    /// Output shape and domain for a given input, checking parameter sizes.
    pub fn propagate(
        &self,
        index: usize,
        input: ActShape,
        domain: Domain,
    ) -> Result<(ActShape, Domain)> {
        let err = |message: String| ModelError::Shape { layer: index, message };
        let check_len = |what: &str, found: usize, expected: usize| {
            if found == expected {
                Ok(())
            } else {
                Err(err(format!("{what}: {found} values, expected {expected}")))
            }
        };
        match self {
            QLayer::RealConv { geometry, weights } => {
                check_len("weights", weights.len(), geometry.weight_count())?;
                Ok((geometry.output_shape(input).map_err(err)?, Domain::Real))
            }
            QLayer::RealLinear { in_features, out_features, weights, bias } => {
                check_len("input", input.len(), *in_features)?;
                check_len("weights", weights.len(), in_features * out_features)?;
                check_len("bias", bias.len(), *out_features)?;
                Ok((ActShape::Flat(*out_features), Domain::Real))
            }
            QLayer::BatchNorm(bn) => {
                check_len("batchnorm channels", bn.channels(), input.channels())?;
                check_len("batchnorm bias", bn.bias.len(), input.channels())?;
                Ok((input, Domain::Real))
            }
            QLayer::Sign => Ok((input, Domain::Binary)),
            QLayer::MaxPool2 => Ok((pool_output_shape(input).map_err(err)?, domain)),
            QLayer::BinConv { geometry, bits, bn, .. } => {
                if domain != Domain::Binary {
                    return Err(ModelError::Domain { layer: index });
                }
                check_len("bits", bits.len(), geometry.weight_count())?;
                check_len("batchnorm channels", bn.channels(), geometry.out_ch)?;
                check_len("batchnorm bias", bn.bias.len(), geometry.out_ch)?;
                Ok((geometry.output_shape(input).map_err(err)?, Domain::Binary))
            }
            QLayer::BinLinear { in_features, out_features, bits, bn, .. } => {
                if domain != Domain::Binary {
                    return Err(ModelError::Domain { layer: index });
                }
                check_len("input", input.len(), *in_features)?;
                check_len("bits", bits.len(), in_features * out_features)?;
                check_len("batchnorm channels", bn.channels(), *out_features)?;
                check_len("batchnorm bias", bn.bias.len(), *out_features)?;
                Ok((ActShape::Flat(*out_features), Domain::Binary))
            }
        }
    }
}

/// A quantized SBNN: an optional declared input shape and a layer stack.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizedModel {
    pub input: Option<ImageShape>,
    pub layers: Vec<QLayer>,
}

impl QuantizedModel {
    /// Per-layer output shapes for `input`.
    pub fn shapes_for(&self, input: ImageShape) -> Result<Vec<ActShape>> {
        let mut shape = ActShape::from(input);
        let mut domain = Domain::Real;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            (shape, domain) = layer.propagate(i, shape, domain)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Shapes for the declared input.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        self.shapes_for(self.input.ok_or(ModelError::MissingInput)?)
    }

    /// Input shape of every layer (the declared input for layer 0).
    pub fn input_shapes(&self, input: ImageShape) -> Result<Vec<ActShape>> {
        let outs = self.shapes_for(input)?;
        let mut ins = Vec::with_capacity(outs.len());
        ins.push(ActShape::from(input));
        ins.extend(outs.iter().take(outs.len().saturating_sub(1)).copied());
        ins.truncate(self.layers.len());
        Ok(ins)
    }

    pub fn binarized_weight_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.bits()).map(|b| b.len()).sum()
    }

    pub fn ones_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.bits())
            .map(|b| b.iter().filter(|&&x| x == 1).count())
            .sum()
    }
}

/// Output spatial index `(y, x)` and kernel offset `k` to an input
/// coordinate, or `None` when it falls in the padding halo.
#[inline]
pub fn conv_input_coord(
    g: &Conv3x3,
    height: usize,
    width: usize,
    y: usize,
    x: usize,
    k: usize,
) -> Option<(usize, usize)> {
    let iy = (y * g.stride + k / 3) as isize - g.padding as isize;
    let ix = (x * g.stride + k % 3) as isize - g.padding as isize;
    (iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width)
        .then_some((iy as usize, ix as usize))
}
