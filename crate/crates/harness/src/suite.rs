use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hetsgd::dataset::Dataset;
use hetsgd::engine::{run_training, RunMetrics};
use log::{error, info};

use crate::analysis::min_loss;
use crate::config::{DataSpec, RunConfig};
use crate::data::load_dataset;
use crate::report::{write_run_files, write_summary_file, RunSummary, SummaryRow};
use crate::HarnessError;

pub fn run_on(config: &RunConfig, data: Arc<Dataset>) -> Result<RunMetrics, HarnessError> {
    info!(
        "run {}: policy {}, {} workers, seed {}",
        config.name,
        config.training.policy.name(),
        config.workers.len(),
        config.seed
    );
    Ok(run_training(data, None, &config.arch, &config.workers, &config.training)?)
}

/// Loads the data and trains one configuration.
pub fn run_experiment(config: &RunConfig) -> Result<RunMetrics, HarnessError> {
    let data = load_dataset(&config.data, config.seed)?;
    run_on(config, data)
}

#[derive(Debug)]
pub struct SuiteRun {
    /// Unique within the suite; used for file names.
    pub name: String,
    pub result: Result<RunMetrics, HarnessError>,
}

#[derive(Debug)]
pub struct SuiteReport {
    pub runs: Vec<SuiteRun>,
    /// Suite-wide minimum loss every series is normalised to.
    pub basis: Option<f64>,
    pub summary: PathBuf,
    pub files: Vec<PathBuf>,
}

fn unique_names(configs: &[RunConfig]) -> Vec<String> {
    let mut seen = HashSet::new();
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let name = if seen.contains(&c.name) {
                format!("{}_{i}", c.name)
            } else {
                c.name.clone()
            };
            seen.insert(name.clone());
            name
        })
        .collect()
}

/// Runs every config, then writes per-run CSVs and `summary.csv` into
/// `out_dir` with losses normalised to the smallest loss seen in any run.
/// A failing run is recorded in the summary and does not stop the suite.
pub fn run_experiment_suite(configs: &[RunConfig], out_dir: &Path) -> Result<SuiteReport, HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::EmptySuite);
    }
    let names = unique_names(configs);
    let mut cache: Vec<(DataSpec, u64, Arc<Dataset>)> = Vec::new();
    let mut runs = Vec::with_capacity(configs.len());
    for (config, name) in configs.iter().zip(names) {
        let cached = cache
            .iter()
            .find(|(spec, seed, _)| *spec == config.data && *seed == config.seed)
            .map(|(_, _, d)| d.clone());
        let data = match cached {
            Some(d) => Ok(d),
            None => load_dataset(&config.data, config.seed).inspect(|d| {
                cache.push((config.data.clone(), config.seed, d.clone()));
            }),
        };
        let result = data.and_then(|d| run_on(config, d));
        if let Err(e) = &result {
            error!("run {name} failed: {e}");
        }
        runs.push(SuiteRun { name, result });
    }

    let basis = min_loss(runs.iter().filter_map(|r| r.result.as_ref().ok()));
    let b = basis.unwrap_or(1.0);
    let mut files = Vec::new();
    let mut rows = Vec::with_capacity(runs.len());
    for (run, config) in runs.iter().zip(configs) {
        let outcome = match &run.result {
            Ok(m) => {
                files.extend(write_run_files(out_dir, &run.name, m, b)?);
                Ok(RunSummary::from_metrics(m))
            }
            Err(e) => Err(e.to_string()),
        };
        rows.push(SummaryRow {
            name: run.name.clone(),
            policy: config.training.policy.name().to_string(),
            seed: config.seed,
            outcome,
        });
    }
    let summary = write_summary_file(out_dir, &rows, b)?;
    Ok(SuiteReport {
        runs,
        basis,
        summary,
        files,
    })
}

/// Every `*.conf` file in `dir`, sorted by path.
pub fn config_files(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| HarnessError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.extension().is_some_and(|x| x == "conf") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
