//! Flat `key=value` run configuration.
//!
//! ```text
//! name = covtype-adaptive
//! seed = 7
//! data.source = synthetic
//! data.synthetic.n = 20000
//! model.layers = 54-64-64-2
//! policy = adaptive
//! worker.0.mode = hogwild_sharded
//! worker.0.threads = 8
//! ```
//!
//! Blank lines and `#` comments are ignored. Command-line `--key=value`
//! overrides replace file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use hetsgd::dataset::LabelMapping;
use hetsgd::engine::{EndOfEpoch, LossCadence, TrainingConfig, WorkerConfig, WorkerMode};
use hetsgd::model::{Architecture, InitScheme};
use hetsgd::policies::{PolicyConfig, ThresholdMode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("override {0:?} is not of the form --key=value")]
    Override(String),
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("{key} = {value:?}: {reason}")]
    Invalid { key: String, value: String, reason: String },
}

/// Ordered key/value pairs as read from a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies `--key=value` arguments.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<(), ConfigError> {
        for arg in args {
            let arg = arg.as_ref();
            let (k, v) = arg
                .strip_prefix("--")
                .and_then(|s| s.split_once('='))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ConfigError::Override(arg.to_string()))?;
            self.set(k, v);
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.parsed(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)], default: Option<T>) -> Result<T, ConfigError> {
        match self.get(key) {
            None => default.ok_or_else(|| ConfigError::Missing(key.to_string())),
            Some(v) => options
                .iter()
                .find(|(name, _)| *name == v)
                .map(|(_, t)| *t)
                .ok_or_else(|| ConfigError::Invalid {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: format!(
                        "expected one of {}",
                        options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
                    ),
                }),
        }
    }
}

fn invalid(key: &str, value: impl ToString, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Libsvm {
        path: PathBuf,
        features: usize,
        labels: LabelMapping,
    },
    Synthetic {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    /// Stratified subsample size.
    pub subsample: Option<usize>,
    /// Rescale every feature to [0, 1].
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSpec,
    pub arch: Architecture,
    pub workers: Vec<WorkerConfig>,
    pub training: TrainingConfig,
    pub output_dir: Option<PathBuf>,
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "name",
    "seed",
    "data.source",
    "data.path",
    "data.features",
    "data.labels",
    "data.subsample",
    "data.normalize",
    "data.synthetic.n",
    "data.synthetic.dim",
    "data.synthetic.classes",
    "data.synthetic.separation",
    "model.layers",
    "model.init",
    "policy",
    "policy.batch",
    "policy.batch_per_thread",
    "policy.replica_batch",
    "policy.alpha",
    "policy.thresholds",
    "train.eta",
    "train.max_eta",
    "train.beta",
    "train.epochs",
    "train.budget_s",
    "train.loss_every_epochs",
    "train.loss_every_batches",
    "train.reshuffle",
    "train.end_of_epoch",
    "train.trace_assignments",
    "output.dir",
];

const WORKER_KEYS: &[&str] = &["mode", "threads", "speed_factor", "min_batch", "max_batch"];

fn worker_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("worker.")?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

impl RunConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        let mut worker_ids = Vec::new();
        for key in kv.keys() {
            if TOP_LEVEL_KEYS.contains(&key) {
                continue;
            }
            match worker_key(key) {
                Some((i, field)) if WORKER_KEYS.contains(&field) => worker_ids.push(i),
                _ => return Err(ConfigError::Unknown(key.to_string())),
            }
        }
        worker_ids.sort_unstable();
        worker_ids.dedup();
        if worker_ids.is_empty() {
            return Err(ConfigError::Missing("worker.0.mode".into()));
        }
        if let Some(pos) = worker_ids.iter().enumerate().position(|(pos, &id)| pos != id) {
            return Err(ConfigError::Missing(format!("worker.{pos}.mode")));
        }

        let seed: u64 = kv.required("seed")?;
        let name = kv.get("name").unwrap_or("run").to_string();

        let source = match kv.choice("data.source", &[("synthetic", 0), ("libsvm", 1)], Some(0))? {
            0 => DataSource::Synthetic {
                n: kv.required("data.synthetic.n")?,
                dim: kv.required("data.synthetic.dim")?,
                classes: kv.or("data.synthetic.classes", 2)?,
                separation: kv.or("data.synthetic.separation", 3.0)?,
            },
            _ => DataSource::Libsvm {
                path: PathBuf::from(kv.required::<String>("data.path")?),
                features: kv.required("data.features")?,
                labels: kv.choice(
                    "data.labels",
                    &[
                        ("zero_one", LabelMapping::ZeroOne),
                        ("plus_minus_one", LabelMapping::PlusMinusOne),
                        ("ordinal", LabelMapping::Ordinal),
                    ],
                    Some(LabelMapping::ZeroOne),
                )?,
            },
        };
        let data = DataSpec {
            source,
            subsample: kv.parsed("data.subsample")?,
            normalize: kv.or("data.normalize", false)?,
        };

        let layers: String = kv.required("model.layers")?;
        let arch = Architecture::parse(&layers).map_err(|e| invalid("model.layers", &layers, &e.to_string()))?;
        let init = kv.choice(
            "model.init",
            &[
                ("scaled_gaussian", InitScheme::ScaledGaussian),
                ("fan_in_std", InitScheme::FanInStd),
                ("sigmoid_gain", InitScheme::SigmoidGain),
            ],
            Some(InitScheme::ScaledGaussian),
        )?;

        let policy = match kv.choice("policy", &[("uniform", 0), ("fixed", 1), ("adaptive", 2)], None)? {
            0 => PolicyConfig::Uniform {
                batch: kv.required("policy.batch")?,
            },
            1 => PolicyConfig::FixedHeterogeneous {
                batch_per_thread: kv.required("policy.batch_per_thread")?,
                replica_batch: kv.required("policy.replica_batch")?,
            },
            _ => PolicyConfig::Adaptive {
                alpha: kv.or("policy.alpha", 2.0)?,
                mode: kv.choice(
                    "policy.thresholds",
                    &[("literal", ThresholdMode::Literal), ("strict", ThresholdMode::StrictRecompute)],
                    Some(ThresholdMode::Literal),
                )?,
            },
        };

        let mut training = TrainingConfig::new(policy, kv.required("train.eta")?);
        training.seed = seed;
        training.init = init;
        training.max_eta = kv.parsed("train.max_eta")?;
        training.beta = kv.or("train.beta", 1.0)?;
        training.epochs = kv.or("train.epochs", 1)?;
        if let Some(s) = kv.parsed::<f64>("train.budget_s")? {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("train.budget_s", s, "must be > 0"));
            }
            training.budget = Some(Duration::from_secs_f64(s));
        }
        training.loss_cadence = match (
            kv.parsed::<usize>("train.loss_every_epochs")?,
            kv.parsed::<usize>("train.loss_every_batches")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "train.loss_every_batches",
                    "",
                    "conflicts with train.loss_every_epochs",
                ))
            }
            (_, Some(n)) => LossCadence::Batches(n),
            (k, None) => LossCadence::Epochs(k.unwrap_or(1)),
        };
        training.reshuffle = kv.or("train.reshuffle", true)?;
        training.end_of_epoch = kv.choice(
            "train.end_of_epoch",
            &[("drain", EndOfEpoch::Drain), ("strict", EndOfEpoch::Strict)],
            Some(EndOfEpoch::Drain),
        )?;
        training.trace_assignments = kv.or("train.trace_assignments", false)?;

        let workers = worker_ids
            .iter()
            .map(|&i| {
                let key = |f: &str| format!("worker.{i}.{f}");
                let mode = kv.choice(
                    &key("mode"),
                    &[
                        ("hogwild_sharded", WorkerMode::HogwildSharded),
                        ("batch_replica", WorkerMode::BatchReplica),
                    ],
                    None,
                )?;
                let threads = kv.or(&key("threads"), 1)?;
                let min_batch = kv.or(&key("min_batch"), 1)?;
                let max_batch = kv.or(&key("max_batch"), usize::MAX)?;
                let w = match mode {
                    WorkerMode::HogwildSharded => WorkerConfig::sharded(threads, min_batch, max_batch),
                    WorkerMode::BatchReplica => WorkerConfig::replica(threads, min_batch, max_batch),
                };
                Ok(w.with_speed_factor(kv.or(&key("speed_factor"), 0.0)?))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;

        Ok(RunConfig {
            name,
            seed,
            data,
            arch,
            workers,
            training,
            output_dir: kv.parsed::<String>("output.dir")?.map(PathBuf::from),
        })
    }

    /// Reads `path`, applies `overrides` and builds the config. A missing
    /// `name` defaults to the file stem.
    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::load(path)?;
        if kv.get("name").is_none() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                kv.set("name", stem);
            }
        }
        kv.apply_overrides(overrides)?;
        Self::from_key_values(&kv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
        seed = 3
        data.synthetic.n = 100   # rows
        data.synthetic.dim = 4
        model.layers = 4-8-2
        policy = uniform
        policy.batch = 16
        train.eta = 0.1
        worker.0.mode = batch_replica
    ";

    #[test]
    fn minimal_config() {
        let c = RunConfig::from_key_values(&KeyValues::parse(BASE).unwrap()).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.training.seed, 3);
        assert_eq!(c.name, "run");
        assert_eq!(c.workers.len(), 1);
        assert_eq!(c.workers[0].mode, WorkerMode::BatchReplica);
        assert_eq!(c.training.policy, PolicyConfig::Uniform { batch: 16 });
        assert_eq!(c.training.loss_cadence, LossCadence::Epochs(1));
        assert!(matches!(c.data.source, DataSource::Synthetic { n: 100, dim: 4, classes: 2, .. }));
    }

    #[test]
    fn seed_is_mandatory() {
        let text = BASE.replace("seed = 3", "");
        let err = RunConfig::from_key_values(&KeyValues::parse(&text).unwrap()).unwrap_err();
        assert!(matches!(err, ConfigError::Missing(k) if k == "seed"));
    }

    #[test]
    fn overrides_win() {
        let mut kv = KeyValues::parse(BASE).unwrap();
        kv.apply_overrides(&["--policy.batch=64", "--seed=9"]).unwrap();
        let c = RunConfig::from_key_values(&kv).unwrap();
        assert_eq!(c.training.policy, PolicyConfig::Uniform { batch: 64 });
        assert_eq!(c.seed, 9);
        assert!(matches!(kv.apply_overrides(&["policy.batch=1"]), Err(ConfigError::Override(_))));
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let kv = KeyValues::parse(&format!("{BASE}\ntrain.etaa = 1")).unwrap();
        assert!(matches!(RunConfig::from_key_values(&kv), Err(ConfigError::Unknown(_))));
        assert!(matches!(KeyValues::parse("a = 1\nnonsense"), Err(ConfigError::Syntax { line: 2, .. })));
        let kv = KeyValues::parse(&format!("{BASE}\nworker.0.threads = many")).unwrap();
        assert!(matches!(RunConfig::from_key_values(&kv), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn worker_indices_must_be_contiguous() {
        let kv = KeyValues::parse(&format!("{BASE}\nworker.2.mode = batch_replica")).unwrap();
        assert!(matches!(RunConfig::from_key_values(&kv), Err(ConfigError::Missing(k)) if k == "worker.1.mode"));
    }

    #[test]
    fn heterogeneous_adaptive_config() {
        let text = "
            seed = 1
            data.source = libsvm
            data.path = /tmp/covtype.libsvm
            data.features = 54
            data.labels = ordinal
            data.subsample = 20000
            data.normalize = true
            model.layers = 54-64-64-2
            policy = adaptive
            policy.thresholds = strict
            train.eta = 0.01
            train.max_eta = 1.5
            train.budget_s = 60
            train.loss_every_batches = 50
            worker.0.mode = hogwild_sharded
            worker.0.threads = 8
            worker.0.speed_factor = 4.5
            worker.0.min_batch = 8
            worker.0.max_batch = 512
            worker.1.mode = batch_replica
            worker.1.min_batch = 128
            worker.1.max_batch = 8192
        ";
        let c = RunConfig::from_key_values(&KeyValues::parse(text).unwrap()).unwrap();
        assert_eq!(
            c.training.policy,
            PolicyConfig::Adaptive {
                alpha: 2.0,
                mode: ThresholdMode::StrictRecompute
            }
        );
        assert_eq!(c.training.budget, Some(Duration::from_secs(60)));
        assert_eq!(c.training.max_eta, Some(1.5));
        assert_eq!(c.training.loss_cadence, LossCadence::Batches(50));
        assert_eq!(c.workers[0].threads, 8);
        assert_eq!(c.workers[0].speed_factor, 4.5);
        assert_eq!(c.workers[1].max_batch, 8192);
        assert_eq!(c.data.subsample, Some(20000));
        assert!(c.data.normalize);
        assert!(matches!(c.data.source, DataSource::Libsvm { features: 54, labels: LabelMapping::Ordinal, .. }));
    }
}
