//! Batch-norm parameters and their folding into integer popcount thresholds.
//!
//! The shift-scale applied to a weighted sum x is
//! `y = gamma * ((x + b) - mu) / sqrt(sigma^2 + eps) + beta`,
//! and the sign of y is what a binarized neuron emits. Folding turns that
//! real-valued test into a single integer comparison on the popcount, so the
//! inference path never touches floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-output-neuron shift-scale parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub bias: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(
        bias: Vec<f64>,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let n = bias.len();
        if [mu.len(), sigma.len(), gamma.len(), beta.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Shape(
                "batch-norm parameter arrays must all have the same length".into(),
            ));
        }
        if epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        Ok(BatchNormParams {
            bias,
            mu,
            sigma,
            gamma,
            beta,
            epsilon,
        })
    }

    /// Identity transform: y = x.
    pub fn identity(n: usize) -> Self {
        BatchNormParams {
            bias: vec![0.0; n],
            mu: vec![0.0; n],
            sigma: vec![0.0; n],
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn len(&self) -> usize {
        self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bias.is_empty()
    }

    /// Shift-scale output for neuron `idx` at weighted sum `x`.
    pub fn shift_scale(&self, idx: usize, x: f64) -> f64 {
        self.gamma[idx] * ((x + self.bias[idx]) - self.mu[idx])
            / (self.sigma[idx] * self.sigma[idx] + self.epsilon).sqrt()
            + self.beta[idx]
    }

    /// Rescale to an input domain multiplied by `scale` (used when the first
    /// layer's training-time sums are a scaled version of the integer sums).
    /// shift_scale on the new domain at `scale*x` equals the old value at `x`.
    pub fn rescale_input(&self, scale: f64) -> Self {
        BatchNormParams {
            bias: self.bias.iter().map(|v| v * scale).collect(),
            mu: self.mu.iter().map(|v| v * scale).collect(),
            sigma: self.sigma.iter().map(|v| v * scale).collect(),
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            epsilon: self.epsilon * scale * scale,
        }
    }
}

/// Comparison direction of a folded threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    /// Fires +1 iff value >= threshold (gamma > 0).
    Geq,
    /// Fires +1 iff value <= threshold (gamma < 0).
    Leq,
}

/// Per-neuron integer thresholds in the popcount domain.
///
/// `t` may lie outside [0, fanin]: a GEQ neuron with t <= 0 is constant +1 and
/// one with t > fanin is constant -1. `tau` keeps the real sum-domain
/// threshold for pipelines that accumulate quantized partial sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub t: Vec<i64>,
    pub dir: Vec<Cmp>,
    pub tau: Vec<f64>,
    pub fanin: usize,
}

impl ThresholdVector {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Threshold test on a popcount value.
    #[inline]
    pub fn fire(&self, idx: usize, popcount: i64) -> bool {
        binarize(popcount, self.t[idx], self.dir[idx]) > 0
    }

    /// Threshold test on a real accumulated sum (quantized-partial-sum path).
    /// Ties fire +1, matching the integer fold.
    #[inline]
    pub fn fire_sum(&self, idx: usize, sum: f64) -> bool {
        match self.dir[idx] {
            Cmp::Geq => sum >= self.tau[idx],
            Cmp::Leq => sum <= self.tau[idx],
        }
    }
}

/// Real sum-domain threshold: `s >= tau` (or `<=`) as an integer test.
/// Used for the first layer, whose inputs are multi-bit pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumThresholds {
    pub t: Vec<i64>,
    pub dir: Vec<Cmp>,
    pub tau: Vec<f64>,
}

impl SumThresholds {
    #[inline]
    pub fn fire(&self, idx: usize, sum: i64) -> bool {
        binarize(sum, self.t[idx], self.dir[idx]) > 0
    }
}

/// Real threshold tau and direction for one neuron: sign of the shift-scale
/// output equals the test (s >= tau) for gamma > 0 and (s <= tau) for
/// gamma < 0. gamma == 0 neurons are constant sign(beta), sign(0) = +1.
fn real_threshold(bn: &BatchNormParams, idx: usize) -> (f64, Cmp) {
    let g = bn.gamma[idx];
    if g == 0.0 {
        // Constant neuron: +inf / -inf thresholds express "never" / "always".
        return if bn.beta[idx] >= 0.0 {
            (f64::NEG_INFINITY, Cmp::Geq)
        } else {
            (f64::INFINITY, Cmp::Geq)
        };
    }
    let tau = bn.mu[idx]
        - bn.bias[idx]
        - bn.beta[idx] * (bn.sigma[idx] * bn.sigma[idx] + bn.epsilon).sqrt() / g;
    (tau, if g > 0.0 { Cmp::Geq } else { Cmp::Leq })
}

/// Fold batch-norm parameters into popcount-domain integer thresholds for a
/// layer of fan-in `fanin` (sum s = 2P - fanin).
pub fn fold_bn_to_thresholds(bn: &BatchNormParams, fanin: usize) -> ThresholdVector {
    assert!(fanin >= 1, "fanin must be >= 1");
    let k = fanin as f64;
    let n = bn.len();
    let mut t = Vec::with_capacity(n);
    let mut dir = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    for i in 0..n {
        let (tau_i, d) = real_threshold(bn, i);
        let ti = if tau_i == f64::NEG_INFINITY {
            0 // constant +1 under GEQ
        } else if tau_i == f64::INFINITY {
            fanin as i64 + 1 // constant -1 under GEQ
        } else {
            match d {
                Cmp::Geq => ((tau_i + k) / 2.0).ceil() as i64,
                Cmp::Leq => ((tau_i + k) / 2.0).floor() as i64,
            }
        };
        t.push(ti);
        dir.push(d);
        tau.push(tau_i);
    }
    ThresholdVector { t, dir, tau, fanin }
}

/// Fold batch-norm parameters into integer sum-domain thresholds
/// (s >= ceil(tau) for GEQ, s <= floor(tau) for LEQ; s must be integer).
pub fn fold_bn_to_sum_thresholds(bn: &BatchNormParams) -> SumThresholds {
    let n = bn.len();
    let mut t = Vec::with_capacity(n);
    let mut dir = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    for i in 0..n {
        let (tau_i, d) = real_threshold(bn, i);
        let ti = if tau_i == f64::NEG_INFINITY {
            i64::MIN / 2
        } else if tau_i == f64::INFINITY {
            i64::MAX / 2
        } else {
            match d {
                Cmp::Geq => tau_i.ceil() as i64,
                Cmp::Leq => tau_i.floor() as i64,
            }
        };
        t.push(ti);
        dir.push(d);
        tau.push(tau_i);
    }
    SumThresholds { t, dir, tau }
}

/// Threshold comparison: +1 iff the test holds. Ties fire +1 by convention.
#[inline]
pub fn binarize(value: i64, threshold: i64, dir: Cmp) -> i8 {
    let fires = match dir {
        Cmp::Geq => value >= threshold,
        Cmp::Leq => value <= threshold,
    };
    if fires {
        1
    } else {
        -1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn single(b: f64, mu: f64, sigma: f64, gamma: f64, beta: f64) -> BatchNormParams {
        BatchNormParams::new(vec![b], vec![mu], vec![sigma], vec![gamma], vec![beta], 1e-5)
            .unwrap()
    }

    #[test]
    fn symmetric_zero_case() {
        // gamma=1, beta=0, b=0, mu=0, K=3 -> tau=0, T=2, GEQ
        let bn = single(0.0, 0.0, 1.0, 1.0, 0.0);
        let tv = fold_bn_to_thresholds(&bn, 3);
        assert_eq!(tv.t[0], 2);
        assert_eq!(tv.dir[0], Cmp::Geq);
        assert_eq!(tv.tau[0], 0.0);
        // fires iff P >= 2, i.e. s >= 0 (s = 2P - 3 at P=2 gives s=1... s>=0 means P>=1.5)
        assert!(tv.fire(0, 2));
        assert!(!tv.fire(0, 1));
    }

    #[test]
    fn sign_flip_case() {
        // gamma=-1 flips the direction: T=1, LEQ
        let bn = single(0.0, 0.0, 1.0, -1.0, 0.0);
        let tv = fold_bn_to_thresholds(&bn, 3);
        assert_eq!(tv.t[0], 1);
        assert_eq!(tv.dir[0], Cmp::Leq);
        assert!(tv.fire(0, 1));
        assert!(!tv.fire(0, 2));
    }

    #[test]
    fn binarize_tie_and_degenerate() {
        assert_eq!(binarize(2, 2, Cmp::Geq), 1); // boundary tie -> +1
        assert_eq!(binarize(1, 2, Cmp::Geq), -1);
        // constant neuron: T <= 0 under GEQ fires for any popcount
        for p in 0..=8 {
            assert_eq!(binarize(p, 0, Cmp::Geq), 1);
            assert_eq!(binarize(p, -3, Cmp::Geq), 1);
            assert_eq!(binarize(p, 9, Cmp::Geq), -1);
        }
    }

    #[test]
    fn gamma_zero_constant_neurons() {
        let k = 5;
        let plus = fold_bn_to_thresholds(&single(1.0, 2.0, 3.0, 0.0, 0.5), k);
        let zero = fold_bn_to_thresholds(&single(1.0, 2.0, 3.0, 0.0, 0.0), k);
        let minus = fold_bn_to_thresholds(&single(1.0, 2.0, 3.0, 0.0, -0.5), k);
        for p in 0..=k as i64 {
            assert!(plus.fire(0, p));
            assert!(zero.fire(0, p), "sign(0) = +1 convention");
            assert!(!minus.fire(0, p));
        }
    }

    /// Exhaustive check of the fold against Eq.-style direct evaluation over
    /// every achievable sum for the given fan-in.
    fn check_fold_exact(bn: &BatchNormParams, k: usize) {
        let tv = fold_bn_to_thresholds(bn, k);
        for i in 0..bn.len() {
            for p in 0..=k as i64 {
                let s = 2 * p - k as i64;
                let y = bn.shift_scale(i, s as f64);
                let expected = y >= 0.0; // sign(0) = +1
                assert_eq!(
                    tv.fire(i, p),
                    expected,
                    "neuron {i}, P={p}, s={s}, y={y}, t={}, dir={:?}",
                    tv.t[i],
                    tv.dir[i]
                );
            }
        }
    }

    #[test]
    fn fold_exact_random_params_k16() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..2000 {
            let bn = single(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(0.0..4.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            check_fold_exact(&bn, 16);
        }
    }

    #[test]
    fn fold_exact_includes_gamma_zero_and_other_fanins() {
        let mut rng = StdRng::seed_from_u64(123);
        for k in [1usize, 3, 7, 16, 33] {
            for _ in 0..200 {
                let gamma = if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(-2.0..2.0)
                };
                let bn = single(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(0.0..3.0),
                    gamma,
                    rng.gen_range(-2.0..2.0),
                );
                check_fold_exact(&bn, k);
            }
        }
    }

    #[test]
    fn binarize_monotone_in_popcount() {
        // GEQ: monotone non-decreasing in P; LEQ: antitone.
        for t in -2..10i64 {
            let mut prev_geq = -1i8;
            let mut prev_leq = 1i8;
            for p in 0..=8i64 {
                let g = binarize(p, t, Cmp::Geq);
                let l = binarize(p, t, Cmp::Leq);
                assert!(g >= prev_geq);
                assert!(l <= prev_leq);
                prev_geq = g;
                prev_leq = l;
            }
        }
    }

    #[test]
    fn rescale_input_preserves_shift_scale() {
        let bn = single(0.3, -1.2, 2.0, 1.5, -0.4);
        let scaled = bn.rescale_input(255.0);
        for s in [-3.0, -0.5, 0.0, 1.0, 7.7] {
            let a = bn.shift_scale(0, s);
            let b = scaled.shift_scale(0, 255.0 * s);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
