//! TOML experiment configuration with strict validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelKind};
use crate::constellation::{side_len, FitSchedule};
use crate::error::{Error, Result};
use crate::objectives::{beta_transform, MCConfig, VibWeights};
use crate::task_env::{AgentSchedule, DatasetSpec};

/// Environment variable naming the root that relative output directories
/// are resolved against.
pub const OUT_ROOT_ENV: &str = "JSCC_OUT_ROOT";

/// Rate weight used when the config names no multipliers at all.
pub const DEFAULT_BETA1_HAT: f64 = 1e-4;
/// Alignment weight used when the config names no multipliers at all.
pub const DEFAULT_BETA2_HAT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub dataset: u64,
    pub init: u64,
    pub channel: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            dataset: 1,
            init: 2,
            channel: 3,
        }
    }
}

impl Seeds {
    /// `s, s + 1, s + 2`.
    pub fn from_base(s: u64) -> Self {
        Self {
            dataset: s,
            init: s.wrapping_add(1),
            channel: s.wrapping_add(2),
        }
    }

    /// `dataset/init/channel`, the form stamped on every output row.
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.init, self.channel)
    }
}

/// The `[dataset]` table; the seed comes from `[seeds]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_test: usize,
    pub l: usize,
    pub d: usize,
    pub latent_dim: usize,
    pub clutter_ratio: f64,
    pub noise_std: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = DatasetSpec::default();
        Self {
            n_train: s.n_train,
            n_test: s.n_test,
            l: s.l,
            d: s.d,
            latent_dim: s.latent_dim,
            clutter_ratio: s.clutter_ratio,
            noise_std: s.noise_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Complex symbols per sample.
    pub k: usize,
    pub encoder_hidden: Vec<usize>,
    pub reshaper_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            k: 16,
            encoder_hidden: vec![128],
            reshaper_hidden: vec![128],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstellationSection {
    pub order: usize,
    pub r_init: f64,
    pub fit: FitSchedule,
}

impl Default for ConstellationSection {
    fn default() -> Self {
        Self {
            order: 16,
            r_init: 2.0,
            fit: FitSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    /// Channel used for training.
    pub kind: ChannelKind,
    pub train_snr_db: f64,
    pub eval_snr_db: Vec<f64>,
    pub eval_kinds: Vec<ChannelKind>,
    pub p_target: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            kind: ChannelKind::Awgn,
            train_snr_db: 10.0,
            eval_snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            eval_kinds: vec![ChannelKind::Awgn, ChannelKind::Rayleigh],
            p_target: 1.0,
        }
    }
}

impl ChannelSection {
    pub fn train_channel(&self) -> Result<ChannelConfig> {
        ChannelConfig::new(self.kind, self.train_snr_db, self.p_target)
    }
}

/// Loss weights, given either directly as `beta1_hat`/`beta2_hat` or as the
/// multipliers `beta1`/`beta2`, which are transformed on load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    pub beta_q: f64,
    /// Quantization-loss hyperparameter recorded for reference only; the
    /// loss does not read it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    /// Standard deviation of the Gaussian likelihood behind the task term.
    pub sigma_c: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            beta1_hat: None,
            beta2_hat: None,
            beta1: None,
            beta2: None,
            beta_q: 1.0,
            zeta: None,
            sigma_c: 1.0,
        }
    }
}

impl WeightsSection {
    /// Fills the default hats when neither form was given.
    fn resolve_defaults(&mut self) {
        let none = [self.beta1_hat, self.beta2_hat, self.beta1, self.beta2]
            .iter()
            .all(Option::is_none);
        if none {
            self.beta1_hat = Some(DEFAULT_BETA1_HAT);
            self.beta2_hat = Some(DEFAULT_BETA2_HAT);
        }
    }

    pub fn vib_weights(&self) -> Result<VibWeights> {
        let w = match (self.beta1_hat, self.beta2_hat, self.beta1, self.beta2) {
            (Some(b1), Some(b2), None, None) => VibWeights::new(b1, b2, self.beta_q)?,
            (None, None, Some(b1), Some(b2)) => {
                let w = beta_transform(b1, b2)?;
                if w.beta1_hat < 0.0 || w.beta2_hat < 0.0 {
                    return Err(Error::Config(format!(
                        "beta2 = {b2} > 1 gives negative loss weights"
                    )));
                }
                w.with_beta_q(self.beta_q)
            }
            (None, None, None, None) => VibWeights::new(DEFAULT_BETA1_HAT, DEFAULT_BETA2_HAT, self.beta_q)?,
            _ => {
                return Err(Error::Config(
                    "weights: give either beta1_hat and beta2_hat, or beta1 and beta2".into(),
                ))
            }
        };
        if !(w.beta_q.is_finite() && w.beta_q >= 0.0) {
            return Err(Error::Config(format!("beta_q must be non-negative, got {}", w.beta_q)));
        }
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Adam learning rate of the encoder and reshaper.
    pub lr: f64,
    /// Learning rate of the fine-tuning phase. Kept small so fine-tuning
    /// refines the pretrained encoder instead of re-scaling it to whatever
    /// grid it is given.
    pub finetune_lr: f64,
    pub log_interval: usize,
    /// Early stop once the mean loss of the latest window improves on the
    /// previous window by less than `early_stop_tol` (relative). A window
    /// of 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    /// Quantize during fine-tuning. Turning this off sends the continuous
    /// symbols while still reporting the quantization loss.
    pub finetune_quantize: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            pretrain_steps: 3000,
            finetune_steps: 1500,
            lr: 1e-3,
            finetune_lr: 4e-5,
            log_interval: 50,
            early_stop_window: 200,
            early_stop_tol: 1e-5,
            finetune_quantize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    /// Task-oriented objective through the frozen agent.
    Atroc,
    /// Reconstruction of the input, evaluated with the same agent.
    Reconstruction,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveMode::Atroc => "atroc",
            ObjectiveMode::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub objective_mode: ObjectiveMode,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            objective_mode: ObjectiveMode::Atroc,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Seeds,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub agent: AgentSchedule,
    pub constellation: ConstellationSection,
    pub channel: ChannelSection,
    pub weights: WeightsSection,
    pub mc: MCConfig,
    pub schedule: ScheduleSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Parses, fills defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.weights.resolve_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fully-resolved TOML; reloading it yields an equal config.
    pub fn to_toml_string(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.weights.resolve_defaults();
        toml::to_string_pretty(&resolved).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            seed: self.seeds.dataset,
            n_train: d.n_train,
            n_test: d.n_test,
            l: d.l,
            d: d.d,
            latent_dim: d.latent_dim,
            clutter_ratio: d.clutter_ratio,
            noise_std: d.noise_std,
        }
    }

    pub fn vib_weights(&self) -> Result<VibWeights> {
        self.weights.vib_weights()
    }

    /// Output directory, placed under `$JSCC_OUT_ROOT` when that is set and
    /// the configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.run.output_dir.is_relative() => PathBuf::from(root).join(&self.run.output_dir),
            _ => self.run.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset_spec().validate()?;
        if self.model.k == 0 {
            return bad("model.k must be at least 1".into());
        }
        if self.model.encoder_hidden.contains(&0) || self.model.reshaper_hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.agent.hidden.contains(&0) || self.agent.batch == 0 || !(self.agent.lr > 0.0) {
            return bad(format!("invalid agent schedule {:?}", self.agent));
        }
        if !(0.0..=1.0).contains(&self.agent.prune_at) || !(self.agent.prune_gap >= 0.0) {
            return bad("agent.prune_at must lie in [0, 1] and prune_gap be non-negative".into());
        }
        side_len(self.constellation.order)?;
        let fit = &self.constellation.fit;
        let r0 = self.constellation.r_init;
        if !(fit.lr > 0.0 && fit.r_min > 0.0 && fit.r_min < r0 && r0 < fit.r_max) {
            return bad(format!("r_init = {r0} must lie inside ({}, {}) with lr > 0", fit.r_min, fit.r_max));
        }
        let ch = &self.channel;
        ChannelConfig::new(ch.kind, ch.train_snr_db, ch.p_target)?;
        if ch.eval_snr_db.is_empty() || ch.eval_kinds.is_empty() {
            return bad("channel.eval_snr_db and channel.eval_kinds must be non-empty".into());
        }
        for &snr in &ch.eval_snr_db {
            ChannelConfig::new(ch.kind, snr, ch.p_target)?;
        }
        self.vib_weights()?;
        if !(self.weights.sigma_c > 0.0 && self.weights.sigma_c.is_finite()) {
            return bad(format!("sigma_c must be positive, got {}", self.weights.sigma_c));
        }
        self.mc.validate()?;
        let s = &self.schedule;
        if !(s.lr > 0.0 && s.lr.is_finite()) || s.log_interval == 0 {
            return bad(format!("schedule needs lr > 0 and log_interval >= 1, got {s:?}"));
        }
        if !(s.finetune_lr > 0.0 && s.finetune_lr.is_finite()) {
            return bad(format!("finetune_lr must be positive, got {}", s.finetune_lr));
        }
        if !(s.early_stop_tol >= 0.0) {
            return bad("early_stop_tol must be non-negative".into());
        }
        Ok(())
    }
}
