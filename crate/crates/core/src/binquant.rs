//! Per-layer quantization into a two-value domain `{alpha, beta}`.
//!
//! A binarized layer stores latent real weights `w`. The forward pass sees
//! `tau * sign(w) + phi`, so every weight takes one of two values
//! `alpha = phi - tau` or `beta = phi + tau`. The same domain can be written
//! as `(xi, eta)` with `alpha = xi * eta` and `beta = (1 + xi) * eta`, which is
//! the form used when the weights are stored as `{0, 1}` bits.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BinQuantError {
    #[error("non-finite weight {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty weight vector")]
    Empty,
    #[error("all binarized weights share one sign (p = {p}); the closed form is undefined")]
    DegenerateSign { p: f64 },
}

pub type Result<T> = std::result::Result<T, BinQuantError>;

/// Real-valued latent weights of one layer. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RealWeights(Vec<f64>);

impl RealWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(BinQuantError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Weights in `{-1, +1}`, stored as `i8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignWeights(Vec<i8>);

impl SignWeights {
    /// Builds from raw values; anything other than `-1`/`+1` is rejected.
    pub fn from_values(values: Vec<i8>) -> Option<Self> {
        values.iter().all(|&v| v == 1 || v == -1).then_some(Self(values))
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_zero_one(&self) -> ZeroOneWeights {
        ZeroOneWeights(self.0.iter().map(|&s| ((s + 1) / 2) as u8).collect())
    }
}

/// Weights in `{0, 1}`; bit `1` maps to `beta`, bit `0` to `alpha`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroOneWeights(Vec<u8>);

impl ZeroOneWeights {
    pub fn from_bits(bits: Vec<u8>) -> Option<Self> {
        bits.iter().all(|&b| b <= 1).then_some(Self(bits))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }

    pub fn to_sign(&self) -> SignWeights {
        SignWeights(self.0.iter().map(|&b| 2 * b as i8 - 1).collect())
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }
}

/// A layer's binary domain in the `(tau, phi)` parametrization.
///
/// `tau > 0` is the canonical case (`alpha < beta`). `tau == 0` is the
/// degenerate single-valued layer produced when every weight has the same
/// sign; `tau < 0` only comes out of a closed-form fit against a sign pattern
/// that disagrees with the weights and is canonicalized before use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaParams {
    pub tau: f64,
    pub phi: f64,
}

impl OmegaParams {
    /// The standard `{-1, +1}` domain (`xi = -1/2`, `eta = 2`).
    pub const PLUS_MINUS_ONE: OmegaParams = OmegaParams { tau: 1.0, phi: 0.0 };

    pub fn new(tau: f64, phi: f64) -> Self {
        Self { tau, phi }
    }

    pub fn from_alpha_beta(alpha: f64, beta: f64) -> Self {
        Self { tau: (beta - alpha) / 2.0, phi: (alpha + beta) / 2.0 }
    }

    pub fn from_xi_eta(xi: f64, eta: f64) -> Self {
        Self::from_alpha_beta(xi * eta, (1.0 + xi) * eta)
    }

    pub fn alpha(&self) -> f64 {
        self.phi - self.tau
    }

    pub fn beta(&self) -> f64 {
        self.phi + self.tau
    }

    pub fn eta(&self) -> f64 {
        2.0 * self.tau
    }

    /// `alpha / eta`; infinite for the degenerate `tau == 0` domain.
    pub fn xi(&self) -> f64 {
        self.alpha() / self.eta()
    }

    pub fn is_canonical(&self) -> bool {
        self.tau > 0.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.tau == 0.0
    }

    /// Value taken by a single `{0, 1}` weight.
    pub fn value_of_bit(&self, bit: u8) -> f64 {
        if bit == 1 {
            self.beta()
        } else {
            self.alpha()
        }
    }
}

/// Result of the closed-form fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaFit {
    pub omega: OmegaParams,
    /// False when the fit produced `tau <= 0`, i.e. `alpha >= beta`.
    pub canonical: bool,
}

/// Fraction and counts of `+1` entries in a sign vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantStats {
    pub p: f64,
    pub upper: usize,
    pub lower: usize,
    pub total: usize,
}

/// Modified sign: `w >= 0` maps to `+1`, so zero never survives binarization.
pub fn sign_binarize(w: &[f64]) -> Result<SignWeights> {
    let mut out = Vec::with_capacity(w.len());
    for (index, &value) in w.iter().enumerate() {
        if !value.is_finite() {
            return Err(BinQuantError::NonFinite { index, value });
        }
        out.push(sign_of(value));
    }
    Ok(SignWeights(out))
}

#[inline]
pub fn sign_of(value: f64) -> i8 {
    if value >= 0.0 {
        1
    } else {
        -1
    }
}

/// Clipped straight-through derivative of the modified sign.
#[inline]
pub fn ste_gradient(upstream: f64, w_latent: f64) -> f64 {
    if (-1.0..=1.0).contains(&w_latent) {
        upstream
    } else {
        0.0
    }
}

pub fn quant_stats(wb: &SignWeights) -> QuantStats {
    let upper = wb.0.iter().filter(|&&s| s == 1).count();
    let total = wb.len();
    QuantStats {
        p: if total == 0 { 0.0 } else { upper as f64 / total as f64 },
        upper,
        lower: total - upper,
        total,
    }
}

fn check_lengths(w: &RealWeights, wb: &SignWeights) -> Result<()> {
    if w.len() != wb.len() {
        return Err(BinQuantError::LengthMismatch { left: w.len(), right: wb.len() });
    }
    if w.is_empty() {
        return Err(BinQuantError::Empty);
    }
    Ok(())
}

/// `sum w_i * wb_i`; equals `|w|_1` when `wb = sign(w)`.
fn signed_correlation(w: &RealWeights, wb: &SignWeights) -> f64 {
    w.as_slice().iter().zip(wb.as_slice()).map(|(&x, &b)| x * b as f64).sum()
}

/// Minimum quantization-error `(tau, phi)` for weights `w` binarized as `wb`.
///
/// With `s = 2p - 1` and `c = sum w_i wb_i` (`c = |w|_1` for `wb = sign(w)`):
/// `tau = (c - s * sum(w)) / (N (1 - s^2))`,
/// `phi = (sum(w) - s * c) / (N (1 - s^2))`.
pub fn fit_omega_closed_form(w: &RealWeights, wb: &SignWeights) -> Result<OmegaFit> {
    check_lengths(w, wb)?;
    let stats = quant_stats(wb);
    if stats.upper == 0 || stats.lower == 0 {
        return Err(BinQuantError::DegenerateSign { p: stats.p });
    }
    let n = w.len() as f64;
    let s = 2.0 * stats.p - 1.0;
    let c = signed_correlation(w, wb);
    let sum = w.sum();
    // 1 - s^2 = 4 p (1 - p), exact in the counts
    let denom = n * 4.0 * stats.p * (1.0 - stats.p);
    let tau = (c - s * sum) / denom;
    let phi = (sum - s * c) / denom;
    let omega = OmegaParams { tau, phi };
    Ok(OmegaFit { omega, canonical: tau > 0.0 })
}

/// Closed-form fit with the degenerate fallback: a layer whose weights all
/// share one sign becomes the constant `phi = mean(w)`, `tau = 0`.
pub fn fit_omega_or_constant(w: &RealWeights, wb: &SignWeights) -> Result<OmegaFit> {
    match fit_omega_closed_form(w, wb) {
        Err(BinQuantError::DegenerateSign { .. }) => Ok(OmegaFit {
            omega: OmegaParams { tau: 0.0, phi: w.sum() / w.len() as f64 },
            canonical: false,
        }),
        other => other,
    }
}

/// Squared reconstruction error `|w - (tau * wb + phi)|^2`.
pub fn binarization_loss(w: &RealWeights, wb: &SignWeights, omega: OmegaParams) -> Result<f64> {
    check_lengths(w, wb)?;
    Ok(w
        .as_slice()
        .iter()
        .zip(wb.as_slice())
        .map(|(&wi, &bi)| {
            let r = wi - (omega.tau * bi as f64 + omega.phi);
            r * r
        })
        .sum())
}

/// Gradient of [`binarization_loss`] with respect to `(tau, phi)`.
///
/// Uses the `|w|_1` form, which is only the true gradient when `wb` is the
/// sign of `w` (then `sum(wb * w) = |w|_1`).
pub fn grad_binarization_loss(
    w: &RealWeights,
    wb: &SignWeights,
    omega: OmegaParams,
) -> Result<(f64, f64)> {
    check_lengths(w, wb)?;
    let stats = quant_stats(wb);
    let n = w.len() as f64;
    let s = 2.0 * stats.p - 1.0;
    let OmegaParams { tau, phi } = omega;
    let dtau = 2.0 * (-signed_correlation(w, wb) + n * (tau + phi * s));
    let dphi = 2.0 * (-w.sum() + n * (phi + tau * s));
    Ok((dtau, dphi))
}

/// `(bit + xi) * eta`, i.e. `alpha` for bit 0 and `beta` for bit 1.
///
/// A non-canonical domain is mapped with its values swapped so the smaller
/// value is always the one attached to bit 0.
pub fn map_zeroone_to_omega(bits: &ZeroOneWeights, omega: OmegaParams) -> RealWeights {
    let (lo, hi) = if omega.tau >= 0.0 {
        (omega.alpha(), omega.beta())
    } else {
        (omega.beta(), omega.alpha())
    };
    RealWeights(bits.as_slice().iter().map(|&b| if b == 1 { hi } else { lo }).collect())
}

/// Canonical `{0, 1}` encoding of `tau * wb + phi`.
///
/// When `tau < 0` the bits are flipped and `tau` negated, which represents the
/// same real weights with `alpha < beta`.
pub fn canonicalize(wb: &SignWeights, omega: OmegaParams) -> (ZeroOneWeights, OmegaParams) {
    if omega.tau < 0.0 {
        let bits = wb.as_slice().iter().map(|&s| ((1 - s) / 2) as u8).collect();
        (ZeroOneWeights(bits), OmegaParams { tau: -omega.tau, phi: omega.phi })
    } else if omega.tau == 0.0 {
        (ZeroOneWeights(vec![0; wb.len()]), omega)
    } else {
        (wb.to_zero_one(), omega)
    }
}
