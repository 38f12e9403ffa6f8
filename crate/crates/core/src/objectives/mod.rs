//! Scalar objectives: KL rate term, Gaussian negative log-likelihood, the
//! multiplier transform, loss breakdowns, and the composed VIB losses.

mod discrete;
mod vib;

pub use discrete::{conditional_entropy, variational_cross_entropy, DiscreteJoint};
pub use vib::{
    ChannelPath, DistortionKind, Link, LinkDraws, LinkGrads, LinkOutput, SampleDraw, VibBatch,
};

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// `KL(N(mu, diag sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_diag_gauss_to_std(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::ShapeMismatch {
            context: "kl divergence",
            expected: vec![mu.len()],
            actual: vec![sigma.len()],
        });
    }
    let mut acc = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::InvalidSigma(s));
        }
        acc += m * m + s * s - 1.0 - 2.0 * s.ln();
    }
    Ok(0.5 * acc)
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Monte Carlo estimate of the same KL: average of `ln q(z) - ln p(z)` over
/// `z ~ q = N(mu, sigma^2)`, `p = N(0, I)`.
pub fn kl_monte_carlo(mu: &[f64], sigma: &[f64], n_samples: usize, rng: &mut Rng) -> Result<McEstimate> {
    if mu.len() != sigma.len() {
        return Err(Error::ShapeMismatch {
            context: "kl divergence",
            expected: vec![mu.len()],
            actual: vec![sigma.len()],
        });
    }
    if let Some(&s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidSigma(s));
    }
    let n = n_samples.max(1);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for (&m, &s) in mu.iter().zip(sigma) {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + s * e;
            // ln q(z) - ln p(z); the 2*pi constants cancel
            log_ratio += -0.5 * e * e - s.ln() + 0.5 * z * z;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / nf).sqrt(),
    })
}

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibWeights {
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    pub beta_q: f64,
    /// Plain information bottleneck: the alignment coefficient is zero and
    /// `beta2_hat` is ignored.
    pub classic_ib: bool,
}

impl VibWeights {
    pub fn new(beta1_hat: f64, beta2_hat: f64, beta_q: f64) -> Result<Self> {
        for (name, v) in [("beta1_hat", beta1_hat), ("beta2_hat", beta2_hat), ("beta_q", beta_q)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(Self {
            beta1_hat,
            beta2_hat,
            beta_q,
            classic_ib: false,
        })
    }

    pub fn alignment_weight(&self) -> f64 {
        if self.classic_ib {
            0.0
        } else {
            self.beta2_hat
        }
    }

    pub fn with_beta_q(self, beta_q: f64) -> Self {
        Self { beta_q, ..self }
    }
}

/// Maps the Lagrange multipliers `(beta1, beta2)` to loss weights:
/// `(beta1 / (1 - beta2), beta2 / (1 - beta2))`, or the plain bottleneck
/// with rate weight `beta1` when `beta2 == 1`.
pub fn beta_transform(beta1: f64, beta2: f64) -> Result<VibWeights> {
    if !(beta1 > 0.0 && beta2 > 0.0 && beta1.is_finite() && beta2.is_finite()) {
        return Err(Error::Config(format!(
            "multipliers must be positive, got beta1 = {beta1}, beta2 = {beta2}"
        )));
    }
    if beta2 == 1.0 {
        return Ok(VibWeights {
            beta1_hat: beta1,
            beta2_hat: 0.0,
            beta_q: 0.0,
            classic_ib: true,
        });
    }
    let d = 1.0 - beta2;
    Ok(VibWeights {
        beta1_hat: beta1 / d,
        beta2_hat: beta2 / d,
        beta_q: 0.0,
        classic_ib: false,
    })
}

/// `-ln N(a; mu, sigma_c^2 I) = |a - mu|^2 / (2 sigma_c^2) + d ln sigma_c + (d/2) ln 2 pi`.
pub fn neg_log_gauss(a: &[f64], mu: &[f64], sigma_c: f64) -> Result<f64> {
    if a.len() != mu.len() {
        return Err(Error::ShapeMismatch {
            context: "gaussian likelihood",
            expected: vec![a.len()],
            actual: vec![mu.len()],
        });
    }
    if !(sigma_c > 0.0) {
        return Err(Error::InvalidSigma(sigma_c));
    }
    let d = a.len() as f64;
    let sq: f64 = a.iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum();
    Ok(sq / (2.0 * sigma_c * sigma_c) + d * sigma_c.ln() + 0.5 * d * (2.0 * PI).ln())
}

/// The terms of one loss evaluation and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Distortion term: agent negative log-likelihood, or reconstruction
    /// negative log-likelihood for the reconstruction baseline.
    pub task_term: f64,
    pub rate_term: f64,
    pub alignment_term: f64,
    pub quant_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(task: f64, rate: f64, alignment: f64, quant: f64, w: &VibWeights) -> Self {
        Self {
            task_term: task,
            rate_term: rate,
            alignment_term: alignment,
            quant_term: quant,
            total: Self::weighted_total(task, rate, alignment, quant, w),
        }
    }

    /// `task + b1 * rate + b2 * alignment + bq * quant`, summed left to right.
    pub fn weighted_total(task: f64, rate: f64, alignment: f64, quant: f64, w: &VibWeights) -> f64 {
        task + w.beta1_hat * rate + w.alignment_weight() * alignment + w.beta_q * quant
    }
}

/// Monte Carlo sizes: `j1` draws for the alignment term, `j2` draws for the
/// task term, `omega` samples per mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MCConfig {
    pub j1: usize,
    pub j2: usize,
    pub omega: usize,
    /// Draw fresh latent and channel samples for the alignment term instead
    /// of reusing the task-term draws.
    pub resample_alignment: bool,
}

impl Default for MCConfig {
    fn default() -> Self {
        Self {
            j1: 1,
            j2: 1,
            omega: 64,
            resample_alignment: false,
        }
    }
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j1 == 0 || self.j2 == 0 || self.omega == 0 {
            return Err(Error::Config(format!("monte carlo sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Number of latent/channel sample sets a loss evaluation consumes.
    pub fn sample_sets(&self) -> usize {
        if self.resample_alignment {
            self.j1 + self.j2
        } else {
            self.j1.max(self.j2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gauss_to_std(&[0.0; 5], &[1.0; 5]).unwrap(), 0.0);
        assert_eq!(kl_diag_gauss_to_std(&[1.0], &[1.0]).unwrap(), 0.5);
        let v = kl_diag_gauss_to_std(&[0.0], &[2.0]).unwrap();
        assert!((v - (1.5 - 2f64.ln())).abs() < 1e-12);
        assert!(kl_diag_gauss_to_std(&[0.0], &[0.0]).is_err());
        assert!(kl_diag_gauss_to_std(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn monte_carlo_kl_examples() {
        let mut rng = stream(3, Purpose::Evaluation);
        let zero = kl_monte_carlo(&[0.0], &[1.0], 100_000, &mut rng).unwrap();
        assert!(zero.mean.abs() < 0.01);
        let two = kl_monte_carlo(&[0.0], &[2.0], 100_000, &mut rng).unwrap();
        assert!((two.mean - 0.807).abs() < 0.02, "{two:?}");
    }

    #[test]
    fn beta_transform_examples() {
        let w = beta_transform(1.0, 0.5).unwrap();
        assert_eq!((w.beta1_hat, w.beta2_hat, w.classic_ib), (2.0, 1.0, false));
        let w = beta_transform(2.0, 0.75).unwrap();
        assert_eq!((w.beta1_hat, w.beta2_hat), (8.0, 3.0));
        let w = beta_transform(5.0, 1.0).unwrap();
        assert!(w.classic_ib);
        assert_eq!(w.beta1_hat, 5.0);
        assert_eq!(w.alignment_weight(), 0.0);
        assert!(beta_transform(0.0, 0.5).is_err());
    }

    #[test]
    fn neg_log_gauss_examples() {
        let v = neg_log_gauss(&[0.3, -0.2], &[0.3, -0.2], 1.0).unwrap();
        assert!((v - (2.0 * PI).ln()).abs() < 1e-15);
        let a = [1.0, 2.0, 3.0];
        let d1 = neg_log_gauss(&a, &[0.0, 2.0, 3.0], 0.5).unwrap();
        let d2 = neg_log_gauss(&a, &[1.0, 2.0, 1.0], 0.5).unwrap();
        assert!(((d2 - d1) - (4.0 - 1.0) / (2.0 * 0.25)).abs() < 1e-12);
        assert!(neg_log_gauss(&a, &[0.0], 1.0).is_err());
        assert!(neg_log_gauss(&a, &a, 0.0).is_err());
    }

    #[test]
    fn sigma_c_does_not_move_the_argmin() {
        let a = [0.4, -1.0];
        let candidates = [[0.0, 0.0], [0.5, -0.9], [0.4, -1.2], [1.0, 1.0]];
        let best = |s: f64| {
            (0..candidates.len())
                .min_by(|&i, &j| {
                    let li = neg_log_gauss(&a, &candidates[i], s).unwrap();
                    let lj = neg_log_gauss(&a, &candidates[j], s).unwrap();
                    li.total_cmp(&lj)
                })
                .unwrap()
        };
        assert_eq!(best(0.1), best(1.0));
        assert_eq!(best(10.0), best(1.0));
    }

    #[test]
    fn breakdown_total_identity() {
        let w = VibWeights::new(1.0, 8192.0, 10.0).unwrap();
        let b = LossBreakdown::compose(0.3, 12.5, 0.31, 0.07, &w);
        assert_eq!(b.total, 0.3 + 1.0 * 12.5 + 8192.0 * 0.31 + 10.0 * 0.07);
        let classic = beta_transform(5.0, 1.0).unwrap();
        let b = LossBreakdown::compose(0.3, 12.5, 0.31, 0.0, &classic);
        assert_eq!(b.total, 0.3 + 5.0 * 12.5);
    }

    #[test]
    fn mc_config_validation() {
        assert!(MCConfig::default().validate().is_ok());
        assert!(MCConfig { j1: 0, ..Default::default() }.validate().is_err());
        let m = MCConfig { j1: 2, j2: 3, omega: 4, resample_alignment: true };
        assert_eq!(m.sample_sets(), 5);
        assert_eq!(MCConfig { resample_alignment: false, ..m }.sample_sets(), 3);
    }
}
