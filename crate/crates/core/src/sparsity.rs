//! Entropy budget and the sparsity penalty.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("entropy target {0} outside [0, 1] bits/weight")]
    EntropyOutOfRange(f64),
    #[error("gamma must lie in [0, 1), got {0}")]
    GammaOutOfRange(f64),
    #[error("weight count must be at least 1")]
    EmptyNetwork,
    #[error("sparsity target {0} outside [0, 1)")]
    SparsityOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, SparsityError>;

/// `j` at or below this value counts as a satisfied constraint.
pub const J_EPSILON: f64 = 1e-12;

/// Default loss fraction assigned to the penalty term.
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Binary entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SparsityError::ProbabilityOutOfRange(p));
    }
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// Inverse of the binary entropy on the branch `p <= 1/2`, by bisection.
pub fn inverse_binary_entropy(h_star: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&h_star) {
        return Err(SparsityError::EntropyOutOfRange(h_star));
    }
    if h_star == 0.0 {
        return Ok(0.0);
    }
    if h_star == 1.0 {
        return Ok(0.5);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    // h is strictly increasing on [0, 1/2]
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if entropy_unchecked(mid) < h_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Ones budget for a network of `total_weights` binarized weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityBudget {
    pub h_star: f64,
    pub total_weights: usize,
    pub p_star: f64,
    /// Maximum number of 1-valued weights.
    pub max_ones: f64,
    /// Fraction of expected connections.
    pub ec: f64,
}

impl SparsityBudget {
    /// `U <= M`.
    pub fn admits(&self, ones: usize) -> bool {
        ones as f64 <= self.max_ones
    }
}

pub fn make_budget(h_star: f64, total_weights: usize) -> Result<SparsityBudget> {
    if total_weights == 0 {
        return Err(SparsityError::EmptyNetwork);
    }
    let p_star = inverse_binary_entropy(h_star)?;
    Ok(SparsityBudget {
        h_star,
        total_weights,
        p_star,
        max_ones: total_weights as f64 * p_star,
        ec: p_star,
    })
}

/// EC for a sparsity target `s`: a 95% sparse network keeps at most 5% ones.
pub fn ec_from_sparsity(sparsity: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(SparsityError::SparsityOutOfRange(sparsity));
    }
    Ok(1.0 - sparsity)
}

/// `max(0, ones / N - ec)` over a concatenated `{0, 1}` vector.
pub fn penalty_g(bits: &[u8], ec: f64) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    let ones = bits.iter().filter(|&&b| b == 1).count();
    penalty_from_counts(ones, bits.len(), ec)
}

/// `max(0, sum((wb + 1) / 2N) - ec)` over a concatenated sign vector.
pub fn penalty_j(wb: &[i8], ec: f64) -> f64 {
    if wb.is_empty() {
        return 0.0;
    }
    let ones = wb.iter().filter(|&&s| s == 1).count();
    penalty_from_counts(ones, wb.len(), ec)
}

pub fn penalty_from_counts(ones: usize, total: usize, ec: f64) -> f64 {
    (ones as f64 / total as f64 - ec).max(0.0)
}

/// Per-weight gradient of `lambda * j` reaching a latent weight inside the
/// STE window. Zero when the penalty is inactive.
pub fn penalty_weight_gradient(lambda: f64, j_value: f64, total: usize) -> f64 {
    if j_value > 0.0 && total > 0 {
        lambda / (2.0 * total as f64)
    } else {
        0.0
    }
}

/// `lambda` such that `lambda * j` is the fraction `gamma` of the total loss
/// `loss_bnn + lambda * j`.
pub fn lambda_update(loss_bnn: f64, j_value: f64, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(SparsityError::GammaOutOfRange(gamma));
    }
    if j_value <= J_EPSILON || gamma == 0.0 {
        return Ok(0.0);
    }
    Ok(gamma * loss_bnn / ((1.0 - gamma) * j_value))
}

/// Penalty bookkeeping owned by a training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyState {
    pub gamma: f64,
    pub lambda: f64,
    pub j_value: f64,
    pub ec: f64,
}

impl PenaltyState {
    pub fn new(gamma: f64, ec: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(SparsityError::GammaOutOfRange(gamma));
        }
        Ok(Self { gamma, lambda: 0.0, j_value: 0.0, ec })
    }

    /// Refreshes `j` and `lambda` for one step; returns `lambda * j`.
    pub fn step(&mut self, loss_bnn: f64, ones: usize, total: usize) -> f64 {
        self.j_value = if total == 0 { 0.0 } else { penalty_from_counts(ones, total, self.ec) };
        // gamma was validated in new()
        self.lambda = lambda_update(loss_bnn, self.j_value, self.gamma).unwrap_or(0.0);
        self.lambda * self.j_value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.11).unwrap() - 0.4999).abs() < 1e-3);
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_binary_entropy(1.0).unwrap(), 0.5);
        assert_eq!(inverse_binary_entropy(0.0).unwrap(), 0.0);
        assert!((inverse_binary_entropy(0.5).unwrap() - 0.1100279).abs() < 1e-7);
        assert!(inverse_binary_entropy(1.01).is_err());
    }

    #[test]
    fn budget_examples() {
        let b = make_budget(1.0, 1000).unwrap();
        assert_eq!((b.ec, b.max_ones), (0.5, 500.0));
        let b = make_budget(0.0, 1000).unwrap();
        assert_eq!((b.ec, b.max_ones), (0.0, 0.0));
        let b = make_budget(0.5, 1000).unwrap();
        assert!((b.max_ones - 110.03).abs() < 0.01);
        assert_eq!(b.ec, b.p_star);
        assert!(make_budget(0.5, 0).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_g(&[0; 20], 0.05), 0.0);
        assert!((penalty_g(&[1; 20], 0.05) - 0.95).abs() < 1e-15);
        let bits = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        assert!((penalty_g(&bits, 0.05) - 0.25).abs() < 1e-15);
        assert_eq!(penalty_j(&[-1; 20], 0.05), 0.0);
        assert!((penalty_j(&[1; 20], 0.05) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn lambda_examples() {
        let l = lambda_update(2.0, 0.25, 0.1).unwrap();
        assert!((l - 0.2 / 0.225).abs() < 1e-15);
        assert!((l * 0.25 / (2.0 + l * 0.25) - 0.1).abs() < 1e-15);
        assert_eq!(lambda_update(5.0, 0.0, 0.1).unwrap(), 0.0);
        assert_eq!(lambda_update(2.0, 0.25, 0.0).unwrap(), 0.0);
        assert!(lambda_update(2.0, 0.25, 1.0).is_err());
    }

    #[test]
    fn sparsity_to_ec() {
        assert!((ec_from_sparsity(0.95).unwrap() - 0.05).abs() < 1e-15);
        assert!(ec_from_sparsity(1.0).is_err());
    }

    #[test]
    fn penalty_state_gamma_zero_is_inert() {
        let mut st = PenaltyState::new(0.0, 0.05).unwrap();
        assert_eq!(st.step(3.0, 90, 100), 0.0);
        assert_eq!(st.lambda, 0.0);
        assert!(st.j_value > 0.0);
        assert!(PenaltyState::new(1.0, 0.05).is_err());
    }
}
