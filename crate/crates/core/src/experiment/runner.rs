//! The training pipeline: pretrain over the analog channel, fit the
//! constellation, fine-tune through the modulated channel, then sweep SNRs.
//!
//! Phase functions mutate a [`Checkpoint`] in place. Parameters change only
//! after a fully finite update, so when a phase returns an error the
//! checkpoint still holds the last good state.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::RngCore;

use super::bits_per_service;
use super::config::{ExperimentConfig, ObjectiveMode};
use super::container::{load_dataset, save_dataset, Checkpoint, Phase};
use super::metrics::{clear_outputs, ChannelLogRow, EvalRow, MetricRow, RTrajectoryRow, RunRecord};
use super::psnr;
use crate::channel::{ChannelConfig, ChannelKind};
use crate::constellation::{build_qam, fit_constellation, FitOutcome, SymbolBlock};
use crate::error::{Error, Result};
use crate::neural::{adam_step, draw_eps, Adam, AdamConfig, GaussianEncoder, Mlp, MlpGrads, NetworkSpec};
use crate::objectives::{ChannelPath, DistortionKind, Link, LinkDraws, MCConfig, VibBatch, VibWeights};
use crate::rng::{stream, substream, Purpose, RngState};
use crate::task_env::{generate_dataset, pretrain_agent, AgentReport, Dataset, FrozenAgent};

pub const CONFIG_ECHO: &str = "config.resolved.toml";
pub const DATASET_FILE: &str = "dataset.bin";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FIT_CKPT: &str = "fit.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const BASELINE_DIR: &str = "baseline";

/// A `u64` seed derived from a base seed and a purpose.
pub fn derive_seed(seed: u64, purpose: Purpose) -> u64 {
    stream(seed, purpose).next_u64()
}

/// Dataset plus the frozen agent every phase evaluates against.
#[derive(Clone, Debug)]
pub struct Environment {
    pub dataset: Dataset,
    pub agent: FrozenAgent,
    pub agent_report: Option<AgentReport>,
}

/// Generates the dataset and pretrains the agent from the config seeds.
pub fn prepare_environment(cfg: &ExperimentConfig) -> Result<Environment> {
    let dataset = generate_dataset(&cfg.dataset_spec())?;
    let (agent, report) = pretrain_agent(&dataset, &cfg.agent, derive_seed(cfg.seeds.init, Purpose::AgentInit))?;
    Ok(Environment {
        dataset,
        agent,
        agent_report: Some(report),
    })
}

fn fresh_adam(lr: f64, n: usize) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        n,
    )
}

/// Encoder and reshaper at initialization.
pub fn init_checkpoint(cfg: &ExperimentConfig, agent: &FrozenAgent) -> Result<Checkpoint> {
    let l = cfg.dataset.l;
    let k = cfg.model.k;
    let encoder = GaussianEncoder::new(l, &cfg.model.encoder_hidden, k, derive_seed(cfg.seeds.init, Purpose::EncoderInit))?;
    let reshaper = Mlp::new(NetworkSpec::mlp(
        2 * k,
        &cfg.model.reshaper_hidden,
        l,
        derive_seed(cfg.seeds.init, Purpose::ReshaperInit),
    ))?;
    Ok(Checkpoint {
        phase: Phase::Init,
        step: 0,
        seeds: cfg.seeds,
        encoder_opt: fresh_adam(cfg.schedule.lr, encoder.net.param_count()),
        reshaper_opt: fresh_adam(cfg.schedule.lr, reshaper.param_count()),
        encoder,
        reshaper,
        agent: agent.clone(),
        constellation: None,
        rng: Vec::new(),
    })
}

/// Loss weights and distortion of the configured objective. The
/// reconstruction objective has no alignment term.
pub fn objective(cfg: &ExperimentConfig) -> Result<(VibWeights, DistortionKind)> {
    let w = cfg.vib_weights()?;
    Ok(match cfg.run.objective_mode {
        ObjectiveMode::Atroc => (w, DistortionKind::Task),
        ObjectiveMode::Reconstruction => (
            VibWeights::new(w.beta1_hat, 0.0, w.beta_q)?,
            DistortionKind::Reconstruction,
        ),
    })
}

struct PhasePlan<'p> {
    label: &'static str,
    steps: usize,
    lr: f64,
    path: &'p ChannelPath,
    batches: Purpose,
    latent: Purpose,
    channel: Purpose,
}

fn grads_finite(g: &MlpGrads) -> bool {
    g.slices().all(|s| s.iter().all(|v| v.is_finite()))
}

/// Mean of `v[from..to]`.
fn window_mean(v: &[f64], from: usize, to: usize) -> f64 {
    v[from..to].iter().sum::<f64>() / (to - from) as f64
}

fn train_phase(cfg: &ExperimentConfig, env: &Environment, ck: &mut Checkpoint, plan: PhasePlan<'_>) -> Result<RunRecord> {
    let (weights, distortion) = objective(cfg)?;
    let chan = cfg.channel.train_channel()?;
    let seed_label = cfg.seeds.label();
    let train = &env.dataset.train;
    let omega = cfg.mc.omega.min(train.len());
    let mut batch_rng = stream(cfg.seeds.init, plan.batches);
    let mut latent_rng = stream(cfg.seeds.init, plan.latent);
    let mut channel_rng = stream(cfg.seeds.channel, plan.channel);
    ck.encoder_opt = fresh_adam(plan.lr, ck.encoder.net.param_count());
    ck.reshaper_opt = fresh_adam(plan.lr, ck.reshaper.param_count());
    ck.step = 0;

    let mut record = RunRecord::default();
    let mut totals: Vec<f64> = Vec::with_capacity(plan.steps);
    let mut acc = [0.0f64; 5];
    let mut acc_n = 0usize;
    let sched = &cfg.schedule;
    for step in 0..plan.steps {
        let idx = sample_indices(&mut batch_rng, train.len(), omega).into_vec();
        let mb = train.select(&idx);
        let link = Link {
            encoder: &ck.encoder,
            reshaper: &ck.reshaper,
            agent: &env.agent,
            path: plan.path,
            p_target: cfg.channel.p_target,
            weights,
            mc: MCConfig { omega, ..cfg.mc },
            sigma_c: cfg.weights.sigma_c,
            distortion,
        };
        let draws = link.draw(&chan, omega, &mut latent_rng, &mut channel_rng);
        let out = link.loss_and_grads(VibBatch { x: &mb.x, a: &mb.a }, &draws)?;
        let grads = out.grads.expect("gradients requested");
        if !grads_finite(&grads.encoder) || !grads_finite(&grads.reshaper) {
            return Err(Error::NonFiniteGradient(format!("{} step {step}", plan.label)));
        }
        adam_step(&mut ck.encoder.net, &mut ck.encoder_opt, &grads.encoder, "encoder")?;
        adam_step(&mut ck.reshaper, &mut ck.reshaper_opt, &grads.reshaper, "reshaper")?;
        ck.step = step as u64 + 1;

        let l = out.loss;
        for (a, v) in acc.iter_mut().zip([l.task_term, l.rate_term, l.alignment_term, l.quant_term, l.total]) {
            *a += v;
        }
        acc_n += 1;
        totals.push(l.total);

        let done = step + 1;
        let w = sched.early_stop_window;
        let stop = w > 0 && done >= 2 * w && done % w == 0 && {
            let prev = window_mean(&totals, done - 2 * w, done - w);
            let cur = window_mean(&totals, done - w, done);
            (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < sched.early_stop_tol
        };
        if done % sched.log_interval == 0 || done == plan.steps || stop {
            let n = acc_n as f64;
            record.metrics.push(MetricRow {
                step: done,
                phase: plan.label.to_string(),
                task: acc[0] / n,
                rate: acc[1] / n,
                alignment: acc[2] / n,
                quant: acc[3] / n,
                total: acc[4] / n,
                snr_db: chan.snr_db,
                seed: seed_label.clone(),
            });
            let first = &out.channel[0];
            record.channel_log.push(ChannelLogRow {
                phase: plan.label.to_string(),
                step: done,
                h_re: first.h.re,
                h_im: first.h.im,
                p_zbar: first.p_zbar,
                seed: seed_label.clone(),
            });
            acc = [0.0; 5];
            acc_n = 0;
        }
        if stop {
            break;
        }
    }
    ck.rng = vec![
        RngState::capture(&batch_rng),
        RngState::capture(&latent_rng),
        RngState::capture(&channel_rng),
    ];
    Ok(record)
}

fn check_seeds(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    if ck.seeds != cfg.seeds {
        return Err(Error::Config(format!(
            "checkpoint seeds {} differ from configured seeds {}",
            ck.seeds.label(),
            cfg.seeds.label()
        )));
    }
    Ok(())
}

/// Trains encoder and reshaper through the analog channel.
pub fn run_pretrain(cfg: &ExperimentConfig, env: &Environment, ck: &mut Checkpoint) -> Result<RunRecord> {
    check_seeds(cfg, ck)?;
    let path = ChannelPath::Analog;
    let rec = train_phase(
        cfg,
        env,
        ck,
        PhasePlan {
            label: "pretrain",
            steps: cfg.schedule.pretrain_steps,
            lr: cfg.schedule.lr,
            path: &path,
            batches: Purpose::PretrainBatches,
            latent: Purpose::PretrainLatent,
            channel: Purpose::PretrainChannel,
        },
    )?;
    ck.phase = Phase::Pretrained;
    Ok(rec)
}

/// Fits the constellation parameter to the encoder's symbols on the
/// training data and stores `r*` in the checkpoint.
pub fn run_fit_constellation(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    ck: &mut Checkpoint,
    r_init: f64,
) -> Result<(FitOutcome, RunRecord)> {
    check_seeds(cfg, ck)?;
    let (lat, _) = ck.encoder.encode(&dataset.train.x)?;
    let n = dataset.train.len();
    let omega = cfg.mc.omega.min(n);
    let width = lat.mu.ncols();
    let mut batch_rng = stream(cfg.seeds.init, Purpose::FitBatches);
    let mut latent_rng = stream(cfg.seeds.init, Purpose::FitLatent);
    let next_batch = |_: usize| -> Vec<SymbolBlock> {
        let idx = sample_indices(&mut batch_rng, n, omega).into_vec();
        let eps = draw_eps(omega, width, &mut latent_rng);
        idx.iter()
            .enumerate()
            .map(|(row, &i)| {
                let z: Vec<f64> = (0..width)
                    .map(|j| lat.mu[[i, j]] + lat.sigma[[i, j]] * eps[[row, j]])
                    .collect();
                SymbolBlock::from_interleaved(&z).expect("finite encoder output")
            })
            .collect()
    };
    let outcome = fit_constellation(next_batch, cfg.constellation.order, r_init, &cfg.constellation.fit)?;
    let seed = cfg.seeds.label();
    let record = RunRecord {
        r_trajectory: outcome
            .trajectory
            .iter()
            .map(|s| RTrajectoryRow {
                r_init,
                step: s.step,
                r: s.r,
                loss: s.loss,
                seed: seed.clone(),
            })
            .collect(),
        ..RunRecord::default()
    };
    ck.constellation = Some(build_qam(cfg.constellation.order, outcome.r_star)?.params());
    ck.phase = Phase::Fitted;
    ck.step = outcome.steps as u64;
    Ok((outcome, record))
}

/// Fine-tunes encoder and reshaper jointly through the modulated channel
/// with constellation parameter `r`.
pub fn run_finetune(cfg: &ExperimentConfig, env: &Environment, ck: &mut Checkpoint, r: f64) -> Result<RunRecord> {
    check_seeds(cfg, ck)?;
    let constellation = build_qam(cfg.constellation.order, r)?;
    ck.constellation = Some(constellation.params());
    let path = ChannelPath::Modulated {
        constellation,
        quantize: cfg.schedule.finetune_quantize,
    };
    let rec = train_phase(
        cfg,
        env,
        ck,
        PhasePlan {
            label: "finetune",
            steps: cfg.schedule.finetune_steps,
            lr: cfg.schedule.finetune_lr,
            path: &path,
            batches: Purpose::FinetuneBatches,
            latent: Purpose::FinetuneLatent,
            channel: Purpose::FinetuneChannel,
        },
    )?;
    ck.phase = Phase::Finetuned;
    Ok(rec)
}

/// Evaluation stream index of one `(kind, snr)` point; the same point always
/// sees the same channel draws, whichever sweep it belongs to.
fn eval_index(kind: ChannelKind, snr: f64) -> u64 {
    let k = match kind {
        ChannelKind::Awgn => 1u64,
        ChannelKind::Rayleigh => 2u64,
    };
    snr.to_bits().rotate_left(7) ^ k
}

/// Link output on the whole test set at one channel point, transmitting the
/// encoder means.
pub fn evaluate_point(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    ck: &Checkpoint,
    kind: ChannelKind,
    snr_db: f64,
) -> Result<EvalRow> {
    let test = &dataset.test;
    let n = test.len();
    let chan = ChannelConfig::new(kind, snr_db, cfg.channel.p_target)?;
    let path = match ck.constellation {
        Some(p) => ChannelPath::Modulated {
            constellation: build_qam(p.order, p.r)?,
            quantize: true,
        },
        None => ChannelPath::Analog,
    };
    let link = Link {
        encoder: &ck.encoder,
        reshaper: &ck.reshaper,
        agent: &ck.agent,
        path: &path,
        p_target: cfg.channel.p_target,
        weights: cfg.vib_weights()?,
        mc: MCConfig {
            j1: 1,
            j2: 1,
            omega: n,
            resample_alignment: false,
        },
        sigma_c: cfg.weights.sigma_c,
        distortion: DistortionKind::Task,
    };
    let mut latent_rng = stream(cfg.seeds.channel, Purpose::Evaluation);
    let mut channel_rng = substream(cfg.seeds.channel, Purpose::Evaluation, eval_index(kind, snr_db));
    let draws = LinkDraws::sample(1, n, ck.encoder.k(), &chan, &mut latent_rng, &mut channel_rng).with_zero_eps();
    let out = link.loss(VibBatch { x: &test.x, a: &test.a }, &draws)?;
    let peak = test.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let order = ck.constellation.map_or(cfg.constellation.order, |p| p.order);
    Ok(EvalRow {
        mode: cfg.run.objective_mode.as_str().to_string(),
        channel: kind.as_str().to_string(),
        snr: snr_db,
        task_loss: out.loss.task_term,
        quant_loss: out.loss.quant_term,
        ser: if out.symbols_sent == 0 {
            0.0
        } else {
            out.symbol_errors as f64 / out.symbols_sent as f64
        },
        psnr: psnr(as_slice(&test.x), as_slice(&out.y), peak)?,
        bits_per_service: bits_per_service(ck.encoder.k(), order)?,
        seed: cfg.seeds.label(),
    })
}

fn as_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// One row per `(kind, snr)`, kinds in the given order, SNRs ascending as
/// listed.
pub fn evaluate_over_snr(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    ck: &Checkpoint,
    kinds: &[ChannelKind],
    snrs: &[f64],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(kinds.len() * snrs.len());
    for &kind in kinds {
        for &snr in snrs {
            rows.push(evaluate_point(cfg, dataset, ck, kind, snr)?);
        }
    }
    Ok(rows)
}

/// Outcome of a full pipeline run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub r_star: f64,
    pub fit_converged: bool,
    pub agent_report: Option<AgentReport>,
    pub checkpoint: Checkpoint,
    pub evaluations: Vec<EvalRow>,
}

fn write_echo(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_ECHO), cfg.to_toml_string()?)?;
    Ok(())
}

/// Saves `ck` beside a failed phase so the last good state survives.
fn save_last_good(dir: &Path, name: &str, ck: &Checkpoint, err: Error) -> Error {
    let path = dir.join(format!("{name}.last_good.ckpt"));
    match ck.save(&path) {
        Ok(()) => err,
        Err(e) => Error::Numerical(format!("{err}; saving the last good checkpoint also failed: {e}")),
    }
}

/// Runs pretraining, constellation fit, fine-tuning and the configured
/// sweep in a fresh output directory.
pub fn run_all(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let env = prepare_environment(cfg)?;
    run_all_with(cfg, &env)
}

/// [`run_all`] on an already prepared dataset and agent.
pub fn run_all_with(cfg: &ExperimentConfig, env: &Environment) -> Result<RunSummary> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    clear_outputs(&dir)?;
    write_echo(cfg, &dir)?;
    save_dataset(&env.dataset, &dir.join(DATASET_FILE))?;

    let mut ck = init_checkpoint(cfg, &env.agent)?;
    run_pretrain(cfg, env, &mut ck)
        .map_err(|e| save_last_good(&dir, "pretrain", &ck, e))?
        .append_to(&dir)?;
    ck.save(&dir.join(PRETRAIN_CKPT))?;

    let (fit, rec) = run_fit_constellation(cfg, &env.dataset, &mut ck, cfg.constellation.r_init)?;
    rec.append_to(&dir)?;
    ck.save(&dir.join(FIT_CKPT))?;

    run_finetune(cfg, env, &mut ck, fit.r_star)
        .map_err(|e| save_last_good(&dir, "finetune", &ck, e))?
        .append_to(&dir)?;
    ck.save(&dir.join(FINETUNE_CKPT))?;

    let evaluations = evaluate_over_snr(cfg, &env.dataset, &ck, &cfg.channel.eval_kinds, &cfg.channel.eval_snr_db)?;
    RunRecord {
        evaluations: evaluations.clone(),
        ..RunRecord::default()
    }
    .append_to(&dir)?;
    Ok(RunSummary {
        output_dir: dir,
        r_star: fit.r_star,
        fit_converged: fit.converged,
        agent_report: env.agent_report,
        checkpoint: ck,
        evaluations,
    })
}

/// The full pipeline under the reconstruction objective, written to the
/// `baseline` subdirectory. Dataset, agent, seeds and bit budget are those
/// of `cfg`.
pub fn run_baseline_reconstruction(cfg: &ExperimentConfig, env: &Environment) -> Result<RunSummary> {
    let mut b = cfg.clone();
    b.run.objective_mode = ObjectiveMode::Reconstruction;
    b.run.output_dir = cfg.run.output_dir.join(BASELINE_DIR);
    run_all_with(&b, env)
}

/// Directory-level steps behind the individual CLI verbs. Each reads what
/// the previous verb wrote to the output directory.
pub mod steps {
    use super::*;

    fn stored_environment(dir: &Path, ck: &Checkpoint) -> Result<Environment> {
        let path = dir.join(DATASET_FILE);
        if !path.exists() {
            return Err(Error::Config(format!("{} is missing; run `pretrain` first", path.display())));
        }
        Ok(Environment {
            dataset: load_dataset(&path)?,
            agent: ck.agent.clone(),
            agent_report: None,
        })
    }

    fn load_required(dir: &Path, name: &str, verb: &str) -> Result<Checkpoint> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Config(format!("{} is missing; run `{verb}` first", path.display())));
        }
        Checkpoint::load(&path)
    }

    /// The most advanced checkpoint in `dir`.
    pub fn latest_checkpoint(dir: &Path) -> Result<Checkpoint> {
        for name in [FINETUNE_CKPT, FIT_CKPT, PRETRAIN_CKPT] {
            let p = dir.join(name);
            if p.exists() {
                return Checkpoint::load(&p);
            }
        }
        Err(Error::Config(format!("no checkpoint in {}; run `pretrain` first", dir.display())))
    }

    pub fn pretrain(cfg: &ExperimentConfig) -> Result<Checkpoint> {
        let dir = cfg.output_dir();
        let env = prepare_environment(cfg)?;
        std::fs::create_dir_all(&dir)?;
        clear_outputs(&dir)?;
        write_echo(cfg, &dir)?;
        save_dataset(&env.dataset, &dir.join(DATASET_FILE))?;
        let mut ck = init_checkpoint(cfg, &env.agent)?;
        run_pretrain(cfg, &env, &mut ck)
            .map_err(|e| save_last_good(&dir, "pretrain", &ck, e))?
            .append_to(&dir)?;
        ck.save(&dir.join(PRETRAIN_CKPT))?;
        Ok(ck)
    }

    pub fn fit(cfg: &ExperimentConfig) -> Result<FitOutcome> {
        let dir = cfg.output_dir();
        let mut ck = load_required(&dir, PRETRAIN_CKPT, "pretrain")?;
        let env = stored_environment(&dir, &ck)?;
        let (fit, rec) = run_fit_constellation(cfg, &env.dataset, &mut ck, cfg.constellation.r_init)?;
        rec.append_to(&dir)?;
        ck.save(&dir.join(FIT_CKPT))?;
        Ok(fit)
    }

    pub fn finetune(cfg: &ExperimentConfig) -> Result<Checkpoint> {
        let dir = cfg.output_dir();
        let mut ck = load_required(&dir, FIT_CKPT, "fit-constellation")?;
        let r = ck
            .constellation
            .map(|p| p.r)
            .ok_or_else(|| Error::Format("fitted checkpoint has no constellation".into()))?;
        let env = stored_environment(&dir, &ck)?;
        run_finetune(cfg, &env, &mut ck, r)
            .map_err(|e| save_last_good(&dir, "finetune", &ck, e))?
            .append_to(&dir)?;
        ck.save(&dir.join(FINETUNE_CKPT))?;
        Ok(ck)
    }

    /// Evaluates the latest checkpoint at the given SNRs for every
    /// configured channel kind.
    pub fn evaluate(cfg: &ExperimentConfig, snrs: &[f64]) -> Result<Vec<EvalRow>> {
        let dir = cfg.output_dir();
        let ck = latest_checkpoint(&dir)?;
        check_seeds(cfg, &ck)?;
        let env = stored_environment(&dir, &ck)?;
        let rows = evaluate_over_snr(cfg, &env.dataset, &ck, &cfg.channel.eval_kinds, snrs)?;
        RunRecord {
            evaluations: rows.clone(),
            ..RunRecord::default()
        }
        .append_to(&dir)?;
        Ok(rows)
    }
}
