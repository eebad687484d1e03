use super::{analytic_omega, ops, LayerParams, LayerSpec, Network, OmegaMode, BN_EPSILON};
use crate::binquant::{self, OmegaParams};
use crate::model::{ActShape, Conv3x3, FoldedBatchNorm, ModelError, QLayer, QuantizedModel};

/// Converts a trained network into `{0, 1}` weights with one domain per
/// binarized layer.
///
/// `Analytic` refits the closed form on the final latent weights, `Learned`
/// reads the trained `(tau, phi)`, `FixedPm1` uses `alpha = -1, beta = +1`.
/// Each binarized layer absorbs its following batchnorm and sign.
pub fn quantize_snapshot(net: &Network, mode: OmegaMode) -> QuantizedModel {
    let mut layers = Vec::new();
    let specs = &net.spec.layers;
    let mut i = 0;
    while i < specs.len() {
        let spec = specs[i];
        match (&spec, &net.params[i]) {
            (LayerSpec::Conv3x3 { in_ch, out_ch, stride, padding, binarized }, LayerParams::Weights(w)) => {
                let geometry = Conv3x3 { in_ch: *in_ch, out_ch: *out_ch, stride: *stride, padding: *padding };
                if *binarized {
                    let (omega, bits) = quantize_weights(&w.latent, w.tau, w.phi, mode);
                    layers.push(QLayer::BinConv { geometry, omega, bits, bn: fold_bn(net, i + 1) });
                    i += 3;
                    continue;
                }
                layers.push(QLayer::RealConv { geometry, weights: w.latent.clone() });
            }
            (LayerSpec::Linear { in_features, out_features, binarized: true }, LayerParams::Weights(w)) => {
                let (omega, bits) = quantize_weights(&w.latent, w.tau, w.phi, mode);
                layers.push(QLayer::BinLinear {
                    in_features: *in_features,
                    out_features: *out_features,
                    omega,
                    bits,
                    bn: fold_bn(net, i + 1),
                });
                i += 3;
                continue;
            }
            (
                LayerSpec::Linear { in_features, out_features, .. }
                | LayerSpec::Classifier { in_features, out_features },
                LayerParams::Weights(w),
            ) => layers.push(QLayer::RealLinear {
                in_features: *in_features,
                out_features: *out_features,
                weights: w.latent.clone(),
                bias: w.bias.clone().unwrap_or_else(|| vec![0.0; *out_features]),
            }),
            (LayerSpec::BatchNorm { .. }, _) => layers.push(QLayer::BatchNorm(fold_bn(net, i))),
            (LayerSpec::SignAct, _) => layers.push(QLayer::Sign),
            (LayerSpec::Pool, _) => layers.push(QLayer::MaxPool2),
            _ => unreachable!("validated network"),
        }
        i += 1;
    }
    QuantizedModel { input: Some(net.spec.input), layers }
}

fn quantize_weights(latent: &[f64], tau: f64, phi: f64, mode: OmegaMode) -> (OmegaParams, Vec<u8>) {
    let omega = match mode {
        OmegaMode::Analytic => analytic_omega(latent),
        OmegaMode::Learned => OmegaParams::new(tau, phi),
        OmegaMode::FixedPm1 => OmegaParams::PLUS_MINUS_ONE,
    };
    let signs = binquant::sign_binarize(latent).expect("latent weights are finite");
    let (bits, omega) = binquant::canonicalize(&signs, omega);
    (omega, bits.into_inner())
}

fn fold_bn(net: &Network, layer: usize) -> FoldedBatchNorm {
    let LayerParams::BatchNorm(bn) = &net.params[layer] else {
        unreachable!("binarized layers are followed by batchnorm")
    };
    FoldedBatchNorm::from_stats(&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, BN_EPSILON)
}

/// Dense float forward pass of a quantized model for one sample.
///
/// Binarized layers expand their bits to `alpha`/`beta` and sum `w * x` in
/// floating point; this is the oracle the integer engine is checked against.
pub fn reference_forward(model: &QuantizedModel, input: &[f64]) -> Result<Vec<f64>, ModelError> {
    let declared = model.input.ok_or(ModelError::MissingInput)?;
    if input.len() != declared.len() {
        return Err(ModelError::InputSize { expected: declared.len(), found: input.len() });
    }
    let in_shapes = model.input_shapes(declared)?;
    let mut x = input.to_vec();
    for (layer, shape) in model.layers.iter().zip(in_shapes) {
        x = match layer {
            QLayer::RealConv { geometry, weights } => {
                let ActShape::Map { height, width, .. } = shape else { unreachable!() };
                ops::conv3x3(&x, weights, geometry, height, width, 0.0).0
            }
            QLayer::RealLinear { out_features, weights, bias, .. } => {
                let mut y = ops::matvec(weights, &x, *out_features);
                for (v, b) in y.iter_mut().zip(bias) {
                    *v += b;
                }
                y
            }
            QLayer::BatchNorm(bn) => {
                let plane = shape.plane();
                x.iter().enumerate().map(|(k, &v)| bn.apply(k / plane, v)).collect()
            }
            QLayer::Sign => x.iter().map(|&v| binquant::sign_of(v) as f64).collect(),
            QLayer::MaxPool2 => {
                let ActShape::Map { channels, height, width } = shape else { unreachable!() };
                ops::maxpool2(&x, channels, height, width).0
            }
            QLayer::BinConv { geometry, omega, bits, bn } => {
                let ActShape::Map { height, width, .. } = shape else { unreachable!() };
                let w: Vec<f64> = bits.iter().map(|&b| omega.value_of_bit(b)).collect();
                let (z, oh, ow) = ops::conv3x3(&x, &w, geometry, height, width, -1.0);
                let plane = oh * ow;
                z.iter().enumerate().map(|(k, &v)| sign_value(bn.sign_decision(k / plane, v))).collect()
            }
            QLayer::BinLinear { out_features, omega, bits, bn, .. } => {
                let w: Vec<f64> = bits.iter().map(|&b| omega.value_of_bit(b)).collect();
                let z = ops::matvec(&w, &x, *out_features);
                z.iter().enumerate().map(|(o, &v)| sign_value(bn.sign_decision(o, v))).collect()
            }
        };
    }
    Ok(x)
}

pub fn reference_predict(model: &QuantizedModel, input: &[f64]) -> Result<usize, ModelError> {
    let logits = reference_forward(model, input)?;
    Ok(super::argmax_rows(&logits, logits.len().max(1))[0])
}

#[inline]
fn sign_value(positive: bool) -> f64 {
    if positive {
        1.0
    } else {
        -1.0
    }
}
