//! Browser bindings for the static demo page in `www/`: the entropy budget,
//! the `{alpha, beta}` fit and the kernel Hamming-weight accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use sbnn_core::binquant::{binarization_loss, fit_omega_or_constant, sign_binarize, RealWeights};
use sbnn_core::infer::classify_kernels;
use sbnn_core::metrics::{bparams_bits_for_classes, gain_estimate, HammingHistogram};
use sbnn_core::sparsity::{binary_entropy, make_budget};

/// `h(p)` at `points` evenly spaced `p` in `[0, 1]`.
#[wasm_bindgen]
pub fn entropy_curve(points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|i| binary_entropy(i as f64 / (points - 1) as f64).unwrap_or(0.0))
        .collect()
}

/// `[p*, M, ec, gain]` for a bits-per-weight target over `n` weights.
#[wasm_bindgen]
pub fn budget(h_star: f64, n: usize) -> Result<Vec<f64>, String> {
    let b = make_budget(h_star, n).map_err(|e| e.to_string())?;
    Ok(vec![b.p_star, b.max_ones, b.ec, gain_estimate(b.ec).unwrap_or(f64::INFINITY)])
}

/// Closed-form domain of `weights` binarized by sign:
/// `[tau, phi, alpha, beta, p, loss]`.
#[wasm_bindgen]
pub fn fit_omega(weights: &[f64]) -> Result<Vec<f64>, String> {
    let w = RealWeights::new(weights.to_vec()).map_err(|e| e.to_string())?;
    let wb = sign_binarize(weights).map_err(|e| e.to_string())?;
    let fit = fit_omega_or_constant(&w, &wb).map_err(|e| e.to_string())?;
    let o = fit.omega;
    let loss = binarization_loss(&w, &wb, o).map_err(|e| e.to_string())?;
    let p = wb.as_slice().iter().filter(|&&s| s == 1).count() as f64 / weights.len() as f64;
    Ok(vec![o.tau, o.phi, o.alpha(), o.beta(), p, loss])
}

/// `count` seeded samples from `N(mean, std)` via Box-Muller.
#[wasm_bindgen]
pub fn sample_weights(count: usize, mean: f64, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: f64 = 1.0 - rng.gen::<f64>();
            let v: f64 = rng.gen();
            mean + std * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

/// `kernels` random 3x3 kernels whose bits are 1 with probability `density`.
#[wasm_bindgen]
pub fn random_kernels(kernels: usize, density: f64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = density.clamp(0.0, 1.0);
    (0..kernels * 9).map(|_| rng.gen_bool(density) as u8).collect()
}

/// Fraction of kernels with Hamming weight 0..=9.
#[wasm_bindgen]
pub fn kernel_histogram(bits: &[u8]) -> Result<Vec<f64>, String> {
    if bits.is_empty() || !bits.len().is_multiple_of(9) {
        return Err(format!("{} bits do not split into 3x3 kernels", bits.len()));
    }
    Ok(HammingHistogram::from_bits(0, bits).fractions().to_vec())
}

/// `[bparams_bits, bparams_pr, k0, k1, kdense, ones_fraction, gain]`.
#[wasm_bindgen]
pub fn kernel_summary(bits: &[u8]) -> Result<Vec<f64>, String> {
    let s = classify_kernels(bits).map_err(|e| e.to_string())?;
    if s.total() == 0 {
        return Err("no kernels".into());
    }
    let total = s.total() as f64;
    let stored = bparams_bits_for_classes(&s.classes) as f64;
    let ones = bits.iter().filter(|&&b| b == 1).count() as f64 / bits.len() as f64;
    Ok(vec![
        stored,
        1.0 - stored / bits.len() as f64,
        s.zero as f64 / total,
        s.single as f64 / total,
        s.dense as f64 / total,
        ones,
        gain_estimate(ones).unwrap_or(f64::INFINITY),
    ])
}
