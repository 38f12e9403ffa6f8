//! Row types of the CSV outputs and the append-only run record.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_CSV: &str = "metrics.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const R_TRAJECTORY_CSV: &str = "r_trajectory.csv";
pub const CHANNEL_LOG_CSV: &str = "channel_log.csv";

/// Mean loss terms over one logging interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub phase: String,
    pub task: f64,
    pub rate: f64,
    pub alignment: f64,
    pub quant: f64,
    pub total: f64,
    pub snr_db: f64,
    pub seed: String,
}

/// One evaluation point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: String,
    pub channel: String,
    pub snr: f64,
    pub task_loss: f64,
    pub quant_loss: f64,
    pub ser: f64,
    /// `inf` when the reshaped output equals the input exactly.
    pub psnr: f64,
    pub bits_per_service: u64,
    pub seed: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RTrajectoryRow {
    pub r_init: f64,
    pub step: usize,
    pub r: f64,
    pub loss: f64,
    pub seed: String,
}

/// Channel coefficient and pre-normalization power of the first sample of
/// a logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLogRow {
    pub phase: String,
    pub step: usize,
    pub h_re: f64,
    pub h_im: f64,
    pub p_zbar: f64,
    pub seed: String,
}

/// Everything a run emits besides checkpoints, in emission order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub metrics: Vec<MetricRow>,
    pub evaluations: Vec<EvalRow>,
    pub r_trajectory: Vec<RTrajectoryRow>,
    pub channel_log: Vec<ChannelLogRow>,
}

impl RunRecord {
    pub fn extend(&mut self, other: RunRecord) {
        self.metrics.extend(other.metrics);
        self.evaluations.extend(other.evaluations);
        self.r_trajectory.extend(other.r_trajectory);
        self.channel_log.extend(other.channel_log);
    }

    /// Appends every non-empty table to its CSV file in `dir`, writing the
    /// header only when the file is new.
    pub fn append_to(&self, dir: &Path) -> Result<()> {
        append_rows(&dir.join(METRICS_CSV), &self.metrics)?;
        append_rows(&dir.join(EVALUATION_CSV), &self.evaluations)?;
        append_rows(&dir.join(R_TRAJECTORY_CSV), &self.r_trajectory)?;
        append_rows(&dir.join(CHANNEL_LOG_CSV), &self.channel_log)?;
        Ok(())
    }
}

pub fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Removes the CSV outputs in `dir` so a fresh run starts from empty files.
pub fn clear_outputs(dir: &Path) -> Result<()> {
    for name in [METRICS_CSV, EVALUATION_CSV, R_TRAJECTORY_CSV, CHANNEL_LOG_CSV] {
        match std::fs::remove_file(dir.join(name)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
    }
    Ok(())
}
