use std::path::Path;

use jscc_core::constellation::quantize_block;
use jscc_core::experiment::metrics::{read_rows, ChannelLogRow, CHANNEL_LOG_CSV, METRICS_CSV};
use jscc_core::experiment::{
    evaluate_point, init_checkpoint, psnr, run_all_with, run_baseline_reconstruction, run_finetune,
    run_fit_constellation, run_pretrain, steps, Checkpoint, Environment, ExperimentConfig, MetricRow,
    FIT_CKPT, PRETRAIN_CKPT,
};
use jscc_core::task_env::{agent_infer, agent_loss, generate_dataset};
use jscc_core::{ChannelKind, FrozenAgent, Mlp, NetworkSpec};
use ndarray::Array2;

const SMALL: &str = r#"
[dataset]
n_train = 256
n_test = 64
l = 12

[model]
k = 4
encoder_hidden = [16]
reshaper_hidden = [16]

[agent]
hidden = [16]
steps = 300
mse_threshold = 10.0

[constellation]
order = 16
fit = { max_steps = 200 }

[channel]
eval_snr_db = [0.0, 10.0]

[mc]
omega = 32

[schedule]
pretrain_steps = 40
finetune_steps = 20
log_interval = 10
early_stop_window = 1000
"#;

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    cfg.run.output_dir = dir.to_path_buf();
    cfg
}

/// Dataset from the config and an untrained frozen agent, which keeps these
/// tests fast.
fn quick_environment(cfg: &ExperimentConfig) -> Environment {
    let dataset = generate_dataset(&cfg.dataset_spec()).unwrap();
    let agent = Mlp::new(NetworkSpec::mlp(cfg.dataset.l, &[8], cfg.dataset.d, 77)).unwrap();
    Environment {
        dataset,
        agent: FrozenAgent::freeze(agent),
        agent_report: None,
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn zero_pretrain_steps_leave_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.schedule.pretrain_steps = 0;
    let env = quick_environment(&cfg);
    let init = init_checkpoint(&cfg, &env.agent).unwrap();
    let mut ck = init.clone();
    let rec = run_pretrain(&cfg, &env, &mut ck).unwrap();
    assert!(rec.metrics.is_empty());
    assert_eq!(ck.encoder, init.encoder);
    assert_eq!(ck.reshaper, init.reshaper);
}

#[test]
fn identical_configs_give_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (small_config(a.path()), small_config(b.path()));
    run_all_with(&ca, &quick_environment(&ca)).unwrap();
    run_all_with(&cb, &quick_environment(&cb)).unwrap();
    for name in [METRICS_CSV, CHANNEL_LOG_CSV, "r_trajectory.csv", "evaluation.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn stepwise_verbs_reproduce_the_full_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (small_config(a.path()), small_config(b.path()));
    jscc_core::experiment::run_all(&ca).unwrap();
    steps::pretrain(&cb).unwrap();
    steps::fit(&cb).unwrap();
    steps::finetune(&cb).unwrap();
    steps::evaluate(&cb, &cb.channel.eval_snr_db).unwrap();
    for name in [METRICS_CSV, CHANNEL_LOG_CSV, "r_trajectory.csv", "evaluation.csv", "finetune.ckpt"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn verbs_out_of_order_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for err in [
        steps::fit(&cfg).map(|_| ()).unwrap_err(),
        steps::finetune(&cfg).map(|_| ()).unwrap_err(),
        steps::evaluate(&cfg, &[0.0]).map(|_| ()).unwrap_err(),
    ] {
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}

#[test]
fn pretraining_never_touches_the_constellation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let env = quick_environment(&cfg);
    let mut ck = init_checkpoint(&cfg, &env.agent).unwrap();
    let rec = run_pretrain(&cfg, &env, &mut ck).unwrap();
    assert!(ck.constellation.is_none());
    assert!(rec.metrics.iter().all(|m| m.quant == 0.0));
}

#[test]
fn finetuning_uses_the_given_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let env = quick_environment(&cfg);
    let mut ck = init_checkpoint(&cfg, &env.agent).unwrap();
    run_pretrain(&cfg, &env, &mut ck).unwrap();

    // a config whose dataset section no longer matches the environment
    let mut other = cfg.clone();
    other.dataset.n_train = 999;
    other.dataset.noise_std = 0.5;
    let (mut a, mut b) = (ck.clone(), ck);
    let ra = run_finetune(&cfg, &env, &mut a, 2.0).unwrap();
    let rb = run_finetune(&other, &env, &mut b, 2.0).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn the_agent_is_frozen_through_every_phase() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let env = quick_environment(&cfg);
    let before = env.agent.fingerprint();
    let summary = run_all_with(&cfg, &env).unwrap();
    assert_eq!(summary.checkpoint.agent.fingerprint(), before);
    for name in [PRETRAIN_CKPT, FIT_CKPT, "finetune.ckpt"] {
        let ck = Checkpoint::load(&dir.path().join(name)).unwrap();
        assert_eq!(ck.agent.fingerprint(), before, "{name}");
    }
}

#[test]
fn noiseless_evaluation_is_the_plain_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let env = quick_environment(&cfg);
    let mut ck = init_checkpoint(&cfg, &env.agent).unwrap();
    run_pretrain(&cfg, &env, &mut ck).unwrap();
    run_fit_constellation(&cfg, &env.dataset, &mut ck, 2.0).unwrap();
    let c = jscc_core::constellation::build_qam(16, ck.constellation.unwrap().r).unwrap();

    let test = &env.dataset.test;
    let (lat, _) = ck.encoder.encode(&test.x).unwrap();
    let k = ck.encoder.k();
    let mut z = Array2::zeros((test.len(), 2 * k));
    for i in 0..test.len() {
        let q = quantize_block(&lat.mean_block(i).unwrap(), &c).to_interleaved();
        z.row_mut(i).assign(&ndarray::ArrayView1::from(&q));
    }
    let y = ck.reshaper.predict(&z).unwrap();
    let a_hat = agent_infer(&ck.agent, &y).unwrap();
    let task = (0..test.len())
        .map(|i| agent_loss(&test.a.row(i).to_vec(), &a_hat.row(i).to_vec(), cfg.weights.sigma_c).unwrap())
        .sum::<f64>()
        / test.len() as f64;
    let peak = test.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let expected_psnr = psnr(test.x.as_slice().unwrap(), y.as_slice().unwrap(), peak).unwrap();

    for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
        let row = evaluate_point(&cfg, &env.dataset, &ck, kind, f64::INFINITY).unwrap();
        assert_eq!(row.ser, 0.0);
        assert!((row.task_loss - task).abs() <= 1e-12 * task.abs(), "{} vs {task}", row.task_loss);
        assert!((row.psnr - expected_psnr).abs() <= 1e-9, "{} vs {expected_psnr}", row.psnr);
    }
}

#[test]
fn sweeps_cover_both_channels_at_every_snr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let summary = run_all_with(&cfg, &quick_environment(&cfg)).unwrap();
    let points: Vec<(String, f64)> = summary.evaluations.iter().map(|e| (e.channel.clone(), e.snr)).collect();
    assert_eq!(
        points,
        vec![
            ("awgn".to_string(), 0.0),
            ("awgn".to_string(), 10.0),
            ("rayleigh".to_string(), 0.0),
            ("rayleigh".to_string(), 10.0),
        ]
    );
    assert!(summary.evaluations.iter().all(|e| e.bits_per_service == 16));
}

#[test]
fn baseline_sees_the_same_channel_draws() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.channel.kind = ChannelKind::Rayleigh;
    let env = quick_environment(&cfg);
    run_all_with(&cfg, &env).unwrap();
    let base = run_baseline_reconstruction(&cfg, &env).unwrap();
    let a: Vec<ChannelLogRow> = read_rows(&dir.path().join(CHANNEL_LOG_CSV)).unwrap();
    let b: Vec<ChannelLogRow> = read_rows(&base.output_dir.join(CHANNEL_LOG_CSV)).unwrap();
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.step, &x.phase, x.h_re, x.h_im), (y.step, &y.phase, y.h_re, y.h_im));
    }
    let m: Vec<MetricRow> = read_rows(&base.output_dir.join(METRICS_CSV)).unwrap();
    assert!(m.iter().all(|r| r.alignment.is_finite()));
}
