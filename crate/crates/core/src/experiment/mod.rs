//! Experiment harness: configuration, the three training phases, SNR
//! sweeps, the reconstruction baseline, metrics and persistence.

pub mod config;
pub mod container;
pub mod metrics;
pub mod runner;

pub use config::{ExperimentConfig, ObjectiveMode, Seeds};
pub use container::{load_dataset, save_dataset, Checkpoint, Phase};
pub use metrics::{EvalRow, MetricRow, RunRecord};
pub use runner::*;

use crate::error::{Error, Result};

/// Payload bits per inference request: `k * log2(u)` for a square QAM of
/// order `u`.
pub fn bits_per_service(k: usize, u: usize) -> Result<u64> {
    let power_of_four = u >= 4 && u.is_power_of_two() && u.trailing_zeros() % 2 == 0;
    if !power_of_four {
        return Err(Error::UnsupportedOrder(u));
    }
    if k == 0 {
        return Err(Error::Config("bits per service needs k >= 1".into()));
    }
    Ok(k as u64 * u64::from(u.trailing_zeros()))
}

/// `10 log10(peak^2 / mse)`; identical inputs give `+inf`.
pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "psnr",
            expected: vec![x.len()],
            actual: vec![y.len()],
        });
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
