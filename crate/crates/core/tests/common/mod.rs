#![allow(dead_code)]

use rand::Rng;
use sbnn_core::binquant::OmegaParams;
use sbnn_core::dataio::ImageShape;
use sbnn_core::model::{ActShape, Conv3x3, FoldedBatchNorm, QLayer, QuantizedModel};

pub fn random_bits(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    let density = [0.0, 0.03, 0.1, 0.3, 0.5, 0.9][rng.gen_range(0..6)];
    let mut bits: Vec<u8> = (0..n).map(|_| rng.gen_bool(density) as u8).collect();
    // seed some single-one kernels so every class shows up
    if n.is_multiple_of(9) && rng.gen_bool(0.5) {
        for k in 0..n / 9 {
            if !rng.gen_bool(0.3) {
                continue;
            }
            bits[k * 9..k * 9 + 9].fill(0);
            bits[k * 9 + rng.gen_range(0..9)] = 1;
        }
    }
    bits
}

pub fn random_omega(rng: &mut impl Rng) -> OmegaParams {
    let tau = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.5) };
    OmegaParams::new(tau, rng.gen_range(-1.0..1.0))
}

/// Batchnorm whose threshold falls inside the reachable pre-activation range.
pub fn random_bn(rng: &mut impl Rng, channels: usize, omega: OmegaParams, fan_in: usize) -> FoldedBatchNorm {
    let spread = (fan_in as f64).sqrt() * (omega.tau.abs() + omega.phi.abs()).max(0.1);
    let scale: Vec<f64> = (0..channels)
        .map(|_| if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(-2.0..2.0) })
        .collect();
    let bias = scale.iter().map(|&s| -s * rng.gen_range(-1.0..1.0) * spread + rng.gen_range(-0.01..0.01)).collect();
    FoldedBatchNorm { scale, bias }
}

fn real_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// A small valid model: optional real conv stem, 1-3 binarized convs with
/// optional pooling, optional binarized linear, real classifier.
pub fn random_model(rng: &mut impl Rng) -> QuantizedModel {
    let input = ImageShape::new(rng.gen_range(1..=3), rng.gen_range(3..=8), rng.gen_range(3..=8));
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
    if rng.gen_bool(0.5) {
        let g = Conv3x3 { in_ch: c, out_ch: rng.gen_range(1..=4), stride: 1, padding: 1 };
        layers.push(QLayer::RealConv { geometry: g, weights: real_vec(rng, g.weight_count()) });
        let scale = (0..g.out_ch).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bias = (0..g.out_ch).map(|_| rng.gen_range(-0.5..0.5)).collect();
        layers.push(QLayer::BatchNorm(FoldedBatchNorm { scale, bias }));
        c = g.out_ch;
    }
    layers.push(QLayer::Sign);
    for _ in 0..rng.gen_range(1..=3) {
        let padding = rng.gen_range(0..=1);
        let stride = rng.gen_range(1..=2);
        let g = Conv3x3 { in_ch: c, out_ch: rng.gen_range(1..=5), stride, padding };
        let Some((oh, ow)) = g.output_dims(h, w) else { break };
        let omega = random_omega(rng);
        let bn = random_bn(rng, g.out_ch, omega, g.fan_in());
        layers.push(QLayer::BinConv { geometry: g, omega, bits: random_bits(rng, g.weight_count()), bn });
        (c, h, w) = (g.out_ch, oh, ow);
        if h >= 2 && w >= 2 && rng.gen_bool(0.3) {
            layers.push(QLayer::MaxPool2);
            (h, w) = (h / 2, w / 2);
        }
    }
    let mut features = c * h * w;
    if rng.gen_bool(0.5) {
        let out = rng.gen_range(1..=6);
        let omega = random_omega(rng);
        let bn = random_bn(rng, out, omega, features);
        layers.push(QLayer::BinLinear {
            in_features: features,
            out_features: out,
            omega,
            bits: random_bits(rng, features * out),
            bn,
        });
        features = out;
    }
    let classes = rng.gen_range(2..=4);
    layers.push(QLayer::RealLinear {
        in_features: features,
        out_features: classes,
        weights: real_vec(rng, features * classes),
        bias: real_vec(rng, classes),
    });
    let model = QuantizedModel { input: Some(input), layers };
    debug_assert!(model.shapes().is_ok());
    model
}

pub fn random_input(rng: &mut impl Rng, shape: ImageShape) -> Vec<f64> {
    (0..shape.len()).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Activations of the dense integer oracle.
#[derive(Clone)]
pub enum OracleAct {
    Real(Vec<f64>),
    Signs(Vec<i64>),
}

/// Integer pre-activations `(z', q)` of one binarized layer.
pub struct OraclePre {
    pub z_prime: Vec<i64>,
    pub q: Vec<i64>,
}

/// Direct-loop forward pass: binarized layers computed as integer sums over
/// `{-1, +1}` activations with a -1 halo, then the float batchnorm decision.
pub fn oracle_forward(model: &QuantizedModel, input: &[f64]) -> (Vec<f64>, Vec<OraclePre>) {
    let shape = model.input.unwrap();
    let mut dims = ActShape::Map { channels: shape.channels, height: shape.height, width: shape.width };
    let mut act = OracleAct::Real(input.to_vec());
    let mut pres = Vec::new();
    for layer in &model.layers {
        act = match (layer, act) {
            (QLayer::RealConv { geometry: g, weights }, OracleAct::Real(x)) => {
                let ActShape::Map { height, width, .. } = dims else { panic!() };
                let (oh, ow) = g.output_dims(height, width).unwrap();
                let mut out = vec![0.0; g.out_ch * oh * ow];
                for o in 0..g.out_ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..g.in_ch {
                                for k in 0..9 {
                                    let iy = (y * g.stride + k / 3) as isize - g.padding as isize;
                                    let ix = (xx * g.stride + k % 3) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width {
                                        let wv = weights[(o * g.in_ch + c) * 9 + k];
                                        if wv != 0.0 {
                                            acc += wv * x[c * height * width + iy as usize * width + ix as usize];
                                        }
                                    }
                                }
                            }
                            out[o * oh * ow + y * ow + xx] = acc;
                        }
                    }
                }
                dims = ActShape::Map { channels: g.out_ch, height: oh, width: ow };
                OracleAct::Real(out)
            }
            (QLayer::BatchNorm(bn), a) => {
                let x = match a {
                    OracleAct::Real(x) => x,
                    OracleAct::Signs(s) => s.iter().map(|&v| v as f64).collect(),
                };
                let plane = dims.plane();
                OracleAct::Real(x.iter().enumerate().map(|(i, &v)| bn.apply(i / plane, v)).collect())
            }
            (QLayer::Sign, OracleAct::Real(x)) => OracleAct::Signs(x.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()),
            (QLayer::Sign, s @ OracleAct::Signs(_)) => s,
            (QLayer::MaxPool2, a) => {
                let ActShape::Map { channels, height, width } = dims else { panic!() };
                let (oh, ow) = (height / 2, width / 2);
                let idx = |c: usize, y: usize, x: usize, dy: usize, dx: usize| c * height * width + (2 * y + dy) * width + 2 * x + dx;
                let windows = (0..channels).flat_map(|c| (0..oh).flat_map(move |y| (0..ow).map(move |x| (c, y, x))));
                dims = ActShape::Map { channels, height: oh, width: ow };
                match a {
                    OracleAct::Real(v) => OracleAct::Real(
                        windows
                            .map(|(c, y, x)| {
                                [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(dy, dx)| v[idx(c, y, x, dy, dx)]).fold(f64::MIN, f64::max)
                            })
                            .collect(),
                    ),
                    OracleAct::Signs(v) => OracleAct::Signs(
                        windows
                            .map(|(c, y, x)| [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(dy, dx)| v[idx(c, y, x, dy, dx)]).max().unwrap())
                            .collect(),
                    ),
                }
            }
            (QLayer::BinConv { geometry: g, omega, bits, bn }, OracleAct::Signs(x)) => {
                let ActShape::Map { height, width, .. } = dims else { panic!() };
                let (oh, ow) = g.output_dims(height, width).unwrap();
                let positions = oh * ow;
                let mut z_prime = vec![0i64; g.out_ch * positions];
                let mut q = vec![0i64; positions];
                let mut out = vec![0i64; g.out_ch * positions];
                for y in 0..oh {
                    for xx in 0..ow {
                        let p = y * ow + xx;
                        let value = |c: usize, k: usize| {
                            let iy = (y * g.stride + k / 3) as isize - g.padding as isize;
                            let ix = (xx * g.stride + k % 3) as isize - g.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width {
                                x[c * height * width + iy as usize * width + ix as usize]
                            } else {
                                -1
                            }
                        };
                        q[p] = (0..g.in_ch).flat_map(|c| (0..9).map(move |k| (c, k))).map(|(c, k)| value(c, k)).sum();
                        for o in 0..g.out_ch {
                            let mut zp = 0;
                            for c in 0..g.in_ch {
                                for k in 0..9 {
                                    if bits[(o * g.in_ch + c) * 9 + k] == 1 {
                                        zp += value(c, k);
                                    }
                                }
                            }
                            z_prime[o * positions + p] = zp;
                            let z = omega.eta() * zp as f64 + omega.alpha() * q[p] as f64;
                            out[o * positions + p] = if bn.apply(o, z) >= 0.0 { 1 } else { -1 };
                        }
                    }
                }
                pres.push(OraclePre { z_prime, q });
                dims = ActShape::Map { channels: g.out_ch, height: oh, width: ow };
                OracleAct::Signs(out)
            }
            (QLayer::BinLinear { in_features, out_features, omega, bits, bn }, OracleAct::Signs(x)) => {
                let q: i64 = x.iter().sum();
                let mut z_prime = Vec::with_capacity(*out_features);
                let mut out = Vec::with_capacity(*out_features);
                for o in 0..*out_features {
                    let zp: i64 = (0..*in_features).filter(|&i| bits[o * in_features + i] == 1).map(|i| x[i]).sum();
                    z_prime.push(zp);
                    let z = omega.eta() * zp as f64 + omega.alpha() * q as f64;
                    out.push(if bn.apply(o, z) >= 0.0 { 1 } else { -1 });
                }
                pres.push(OraclePre { z_prime, q: vec![q] });
                dims = ActShape::Flat(*out_features);
                OracleAct::Signs(out)
            }
            (QLayer::RealLinear { in_features, out_features, weights, bias }, a) => {
                let x = match a {
                    OracleAct::Real(x) => x,
                    OracleAct::Signs(s) => s.iter().map(|&v| v as f64).collect(),
                };
                let out = (0..*out_features)
                    .map(|o| {
                        let mut acc = 0.0;
                        for i in 0..*in_features {
                            acc += weights[o * in_features + i] * x[i];
                        }
                        acc + bias[o]
                    })
                    .collect();
                dims = ActShape::Flat(*out_features);
                OracleAct::Real(out)
            }
            (l, _) => panic!("oracle: unexpected layer {}", l.name()),
        };
    }
    let OracleAct::Real(logits) = act else { panic!("model must end in a real layer") };
    (logits, pres)
}
