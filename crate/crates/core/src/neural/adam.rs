use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update. `params` and `grads` are visited as
    /// matching sequences of buffers whose total length equals [`Adam::len`].
    /// Nothing is written when any gradient is non-finite.
    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut [f64]>,
        grads: impl IntoIterator<Item = &'b [f64]> + Clone,
        label: &str,
    ) -> Result<()> {
        let total: usize = grads.clone().into_iter().map(|g| g.len()).sum();
        if total != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer state",
                expected: vec![self.m.len()],
                actual: vec![total],
            });
        }
        if let Some(bad) = grads
            .clone()
            .into_iter()
            .flatten()
            .position(|g| !g.is_finite())
        {
            return Err(Error::NonFiniteGradient(format!("{label}[{bad}]")));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut i = 0;
        for (p, g) in params.into_iter().zip(grads) {
            for (p, &g) in p.iter_mut().zip(g) {
                let m = beta1 * self.m[i] + (1.0 - beta1) * g;
                let v = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                self.m[i] = m;
                self.v[i] = v;
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                i += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut p = [1.0, -2.0, 3.0];
        adam.step([&mut p[..]], [&[0.0, 0.0, 0.0][..]], "p").unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02, 250.0] {
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            let mut adam = Adam::new(cfg, 1);
            let mut p = [0.5];
            adam.step([&mut p[..]], [&[g][..]], "p").unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = 0.5 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] - (0.5 - 0.01 * g.signum())).abs() < 1e-8);
        }
    }

    #[test]
    fn small_learning_rate_is_accepted() {
        let cfg: AdamConfig = toml::from_str("lr = 4e-5").unwrap();
        assert_eq!(cfg.lr, 4e-5);
        assert_eq!(cfg.beta2, 0.999);
    }

    #[test]
    fn non_finite_gradient_aborts_without_writing() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = [1.0, 1.0];
        let err = adam.step([&mut p[..]], [&[0.1, f64::NAN][..]], "enc").unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref s) if s == "enc[1]"));
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(adam.t, 0);
    }
}
