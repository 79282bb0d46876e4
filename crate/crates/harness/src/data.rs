use std::sync::Arc;

use hetsgd::dataset::{load_libsvm, subsample, synthetic_blobs, Dataset};
use log::info;

use crate::config::{DataSource, DataSpec};
use crate::HarnessError;

/// Materialises the dataset a config describes. Subsampling and synthetic
/// generation are seeded with `seed`.
pub fn load_dataset(spec: &DataSpec, seed: u64) -> Result<Arc<Dataset>, HarnessError> {
    let mut ds = match &spec.source {
        DataSource::Libsvm { path, features, labels } => load_libsvm(path, *features, *labels)?,
        DataSource::Synthetic {
            n,
            dim,
            classes,
            separation,
        } => synthetic_blobs(*n, *dim, *classes, *separation, seed)?,
    };
    if let Some(n) = spec.subsample {
        if n < ds.len() {
            ds = subsample(&ds, n, seed)?;
        }
    }
    if spec.normalize {
        ds.normalize_min_max();
    }
    info!("loaded {} rows x {} features, {} classes", ds.len(), ds.dim(), ds.classes());
    Ok(Arc::new(ds))
}
