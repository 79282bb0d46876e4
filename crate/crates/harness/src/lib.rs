//! Experiment driver for `hetsgd`: configuration files, dataset loading,
//! suite execution and CSV reporting.

pub mod analysis;
pub mod calibrate;
pub mod config;
pub mod data;
pub mod report;
pub mod suite;

use std::path::PathBuf;

use thiserror::Error;

pub use analysis::{update_ratio, utilization_proxy};
pub use config::{ConfigError, KeyValues, RunConfig};
pub use suite::{run_experiment, run_experiment_suite};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] hetsgd::dataset::DatasetError),
    #[error(transparent)]
    Engine(#[from] hetsgd::engine::EngineError),
    #[error(transparent)]
    Model(#[from] hetsgd::model::ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("no model updates were recorded, the update ratio is undefined")]
    NoUpdates,
    #[error("an experiment suite needs at least one configuration")]
    EmptySuite,
    #[error("calibration failed: {0}")]
    Calibration(String),
}

impl From<std::io::Error> for HarnessError {
    fn from(source: std::io::Error) -> Self {
        HarnessError::Io {
            path: PathBuf::new(),
            source,
        }
    }
}
