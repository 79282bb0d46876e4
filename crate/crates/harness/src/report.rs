//! CSV writers. Headers are fixed; floats are written in shortest
//! round-trip form so reruns can be compared byte for byte.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use hetsgd::engine::RunMetrics;

use crate::analysis::{update_ratio, utilization_proxy};
use crate::HarnessError;

pub const LOSS_HEADER: [&str; 4] = ["wall_ms", "epoch", "loss", "loss_normalized"];
pub const BATCH_TRACE_HEADER: [&str; 3] = ["wall_ms", "worker", "batch_size"];
pub const WORKER_HEADER: [&str; 8] = [
    "worker",
    "update_count",
    "update_share",
    "applied_updates",
    "batches",
    "examples",
    "busy_ms",
    "utilization",
];
pub const SUMMARY_HEADER: [&str; 12] = [
    "name",
    "policy",
    "seed",
    "status",
    "initial_loss",
    "final_loss",
    "min_loss",
    "final_normalized",
    "min_normalized",
    "wall_ms",
    "epochs",
    "error",
];

fn normalized(loss: f64, basis: f64) -> f64 {
    loss / basis
}

pub fn write_loss_series<W: Write>(out: W, metrics: &RunMetrics, basis: f64) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_HEADER)?;
    for s in &metrics.samples {
        w.write_record([
            s.wall_ms.to_string(),
            s.epoch.to_string(),
            s.loss.to_string(),
            normalized(s.loss, basis).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_batch_trace<W: Write>(out: W, metrics: &RunMetrics) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BATCH_TRACE_HEADER)?;
    for e in &metrics.batch_size_trace {
        w.write_record([e.wall_ms.to_string(), e.worker.to_string(), e.batch_size.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_worker_table<W: Write>(out: W, metrics: &RunMetrics) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WORKER_HEADER)?;
    let shares = update_ratio(metrics).unwrap_or_else(|_| vec![0.0; metrics.workers.len()]);
    let util = utilization_proxy(metrics);
    for (i, m) in metrics.workers.iter().enumerate() {
        w.write_record([
            i.to_string(),
            m.update_count.to_string(),
            shares[i].to_string(),
            m.applied_updates.to_string(),
            m.batches.to_string(),
            m.examples.to_string(),
            m.busy_ms.to_string(),
            util[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the suite summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub policy: String,
    pub seed: u64,
    pub outcome: Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub min_loss: f64,
    pub wall_ms: f64,
    pub epochs: usize,
}

impl RunSummary {
    pub fn from_metrics(m: &RunMetrics) -> Self {
        RunSummary {
            initial_loss: m.initial_loss().unwrap_or(f64::NAN),
            final_loss: m.final_loss().unwrap_or(f64::NAN),
            min_loss: m.samples.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min),
            wall_ms: m.wall_ms,
            epochs: m.epochs_completed,
        }
    }
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow], basis: f64) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let head = [r.name.clone(), r.policy.clone(), r.seed.to_string()];
        let tail: [String; 9] = match &r.outcome {
            Ok(s) => [
                "ok".into(),
                s.initial_loss.to_string(),
                s.final_loss.to_string(),
                s.min_loss.to_string(),
                normalized(s.final_loss, basis).to_string(),
                normalized(s.min_loss, basis).to_string(),
                s.wall_ms.to_string(),
                s.epochs.to_string(),
                String::new(),
            ],
            Err(e) => [
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ],
        };
        w.write_record(head.iter().chain(tail.iter()))?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<File, HarnessError> {
    File::create(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<name>_loss.csv`, `<name>_batch_sizes.csv` and
/// `<name>_workers.csv` into `dir`.
pub fn write_run_files(dir: &Path, name: &str, metrics: &RunMetrics, basis: f64) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let loss = dir.join(format!("{name}_loss.csv"));
    write_loss_series(create(&loss)?, metrics, basis)?;
    let trace = dir.join(format!("{name}_batch_sizes.csv"));
    write_batch_trace(create(&trace)?, metrics)?;
    let workers = dir.join(format!("{name}_workers.csv"));
    write_worker_table(create(&workers)?, metrics)?;
    Ok(vec![loss, trace, workers])
}

pub fn write_summary_file(dir: &Path, rows: &[SummaryRow], basis: f64) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join("summary.csv");
    write_summary(create(&path)?, rows, basis)?;
    Ok(path)
}
