use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jscc_core::experiment::{
    prepare_environment, run_all, run_baseline_reconstruction, steps, EvalRow, ExperimentConfig, Seeds,
};
use jscc_core::Error;

#[derive(Parser)]
#[command(name = "jscc", version, about = "Task-oriented JSCC link training and evaluation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the dataset, pretrain the agent, and train encoder and
    /// reshaper through the analog channel
    Pretrain(Common),
    /// Fit the constellation parameter to the pretrained encoder
    FitConstellation(Common),
    /// Fine-tune encoder and reshaper through the modulated channel
    Finetune(Common),
    /// Evaluate the latest checkpoint at the training SNR, or at --snr
    Evaluate(Common),
    /// Full pipeline under the reconstruction objective, in <out>/baseline
    Baseline(Common),
    /// Evaluate the latest checkpoint over the configured SNR list
    Sweep(Common),
    /// Pretrain, fit, fine-tune and sweep in one go
    All(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used when omitted
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Evaluation SNRs in dB, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    /// Training SNR in dB
    #[arg(long, allow_negative_numbers = true)]
    train_snr: Option<f64>,
    /// Base seed; the dataset, init and channel seeds become s, s+1, s+2
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (relative paths resolve under $JSCC_OUT_ROOT when set)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::from_toml_str("")?,
        };
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_base(s);
        }
        if let Some(snr) = &self.snr {
            cfg.channel.eval_snr_db = snr.clone();
        }
        if let Some(t) = self.train_snr {
            cfg.channel.train_snr_db = t;
        }
        if let Some(out) = &self.out {
            cfg.run.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_rows(rows: &[EvalRow]) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "mode\tchannel\tsnr\ttask_loss\tquant_loss\tser\tpsnr\tbits")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.5}\t{:.3}\t{}",
            r.mode, r.channel, r.snr, r.task_loss, r.quant_loss, r.ser, r.psnr, r.bits_per_service
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.verb {
        Verb::Pretrain(c) => {
            let cfg = c.config()?;
            let ck = steps::pretrain(&cfg)?;
            println!("pretrained {} steps, written to {}", ck.step, cfg.output_dir().display());
        }
        Verb::FitConstellation(c) => {
            let cfg = c.config()?;
            let fit = steps::fit(&cfg)?;
            println!(
                "r* = {:.6} after {} steps ({})",
                fit.r_star,
                fit.steps,
                if fit.converged { "converged" } else { "step budget reached" }
            );
        }
        Verb::Finetune(c) => {
            let cfg = c.config()?;
            let ck = steps::finetune(&cfg)?;
            println!("fine-tuned {} steps, written to {}", ck.step, cfg.output_dir().display());
        }
        Verb::Evaluate(c) => {
            let cfg = c.config()?;
            let snrs = c.snr.clone().unwrap_or_else(|| vec![cfg.channel.train_snr_db]);
            print_rows(&steps::evaluate(&cfg, &snrs)?)?;
        }
        Verb::Sweep(c) => {
            let cfg = c.config()?;
            print_rows(&steps::evaluate(&cfg, &cfg.channel.eval_snr_db)?)?;
        }
        Verb::Baseline(c) => {
            let cfg = c.config()?;
            let env = prepare_environment(&cfg)?;
            let s = run_baseline_reconstruction(&cfg, &env)?;
            println!("baseline r* = {:.6}, written to {}", s.r_star, s.output_dir.display());
            print_rows(&s.evaluations)?;
        }
        Verb::All(c) => {
            let cfg = c.config()?;
            let s = run_all(&cfg)?;
            if let Some(rep) = s.agent_report {
                println!("agent test mse {:.3e}, {} inputs pruned", rep.test_mse, rep.zeroed_inputs);
            }
            println!("r* = {:.6}, written to {}", s.r_star, s.output_dir.display());
            print_rows(&s.evaluations)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
