use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn jscc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jscc"))
        .args(args)
        .env_remove("JSCC_OUT_ROOT")
        .output()
        .unwrap()
}

fn smoke_args<'a>(verb: &'a str, out: &'a str, smoke: &'a str) -> Vec<&'a str> {
    vec![verb, "--config", smoke, "--out", out]
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_every_verb() {
    let o = jscc(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for verb in ["pretrain", "fit-constellation", "finetune", "evaluate", "baseline", "sweep", "all"] {
        assert!(text.contains(verb), "{verb} missing from\n{text}");
    }
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = repo_file("configs/default.toml");
    let mut from_file = jscc_core::experiment::ExperimentConfig::load(&path).unwrap();
    let defaults = jscc_core::experiment::ExperimentConfig::from_toml_str("").unwrap();
    from_file.run.output_dir = defaults.run.output_dir.clone();
    assert_eq!(from_file, defaults);
}

#[test]
fn config_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nk = 4\nwidth = 3\n").unwrap();
    let o = jscc(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));

    let out = dir.path().join("empty");
    let o = jscc(&["fit-constellation", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = jscc(&["evaluate", "--snr", "oops"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verbs_run_the_pipeline_step_by_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let smoke = repo_file("configs/smoke.toml");
    let smoke_s = smoke.to_str().unwrap();

    for verb in ["pretrain", "fit-constellation", "finetune"] {
        let o = jscc(&smoke_args(verb, out_s, smoke_s));
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["pretrain.ckpt", "fit.ckpt", "finetune.ckpt", "dataset.bin", "config.resolved.toml", "metrics.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let mut args = smoke_args("evaluate", out_s, smoke_s);
    args.extend(["--snr", "-5,5"]);
    let o = jscc(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    // header plus awgn and rayleigh at both points
    assert_eq!(text.lines().count(), 5, "{text}");
    assert!(text.contains("awgn\t-5\t"));

    let o = jscc(&smoke_args("sweep", out_s, smoke_s));
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 5);

    let o = jscc(&smoke_args("baseline", out_s, smoke_s));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("reconstruction\tawgn"));
    assert!(out.join("baseline").join("finetune.ckpt").exists());
}

#[test]
fn seed_override_reaches_the_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let smoke = repo_file("configs/smoke.toml");
    let o = jscc(&["pretrain", "--config", smoke.to_str().unwrap(), "--seed", "40", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let echo = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(echo.contains("dataset = 40\ninit = 41\nchannel = 42"), "{echo}");

    // the checkpoint carries the seeds, so fitting with other seeds is refused
    let o = jscc(&["fit-constellation", "--config", smoke.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn relative_outputs_resolve_under_the_root_variable() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = repo_file("configs/smoke.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_jscc"))
        .args(["pretrain", "--config", smoke.to_str().unwrap(), "--out", "nested/run"])
        .env("JSCC_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("nested/run/pretrain.ckpt").exists());
}

#[test]
fn numerical_aborts_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let smoke = repo_file("configs/smoke.toml");
    let o = jscc(&["pretrain", "--config", smoke.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());

    // a step size this large throws r out of its admissible range
    let cfg = dir.path().join("diverge.toml");
    let text = std::fs::read_to_string(&smoke)
        .unwrap()
        .replace("max_steps = 200", "max_steps = 200\nlr = 1000.0\nr_max = 2.5");
    std::fs::write(&cfg, text).unwrap();
    let o = jscc(&["fit-constellation", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
