//! Throughput measurement used to emulate devices of a given relative speed
//! on whatever hardware the run happens to use.

use std::sync::Arc;
use std::time::{Duration, Instant};

use hetsgd::dataset::{BatchRef, Dataset};
use hetsgd::engine::{execute_batch_replica, execute_hogwild_sharded, WorkerConfig, WorkerMode};
use hetsgd::model::{Architecture, InitScheme, Model};

use crate::HarnessError;

/// Unthrottled examples per second of CPU time for `worker` consuming batches
/// of `batch` rows, measured for at least `min_time` after one warm-up batch.
/// CPU time is what the throttle bills, so the result does not depend on
/// how busy the machine is.
pub fn measure_throughput(
    arch: &Architecture,
    data: &Arc<Dataset>,
    worker: &WorkerConfig,
    batch: usize,
    min_time: Duration,
) -> Result<f64, HarnessError> {
    let batch = batch.clamp(1, data.len());
    let model = Model::init(arch, 0, InitScheme::ScaledGaussian);
    let replica = model.deep_copy();
    let pool = if worker.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(worker.threads)
                .build()
                .map_err(|e| HarnessError::Calibration(e.to_string()))?,
        )
    } else {
        None
    };
    let mut start_row = 0;
    let mut step = || -> Result<Duration, HarnessError> {
        if start_row + batch > data.len() {
            start_row = 0;
        }
        let b = BatchRef::new(data.clone(), start_row, batch)?;
        start_row += batch;
        // tiny step so the weights stay put
        let out = match worker.mode {
            WorkerMode::HogwildSharded => execute_hogwild_sharded(&model, &b, worker.threads, pool.as_ref(), 1e-9, 1.0)?,
            WorkerMode::BatchReplica => execute_batch_replica(&model, &replica, &b, worker.threads, pool.as_ref(), 1e-9)?,
        };
        Ok(out.cpu_time)
    };
    step()?;
    let start = Instant::now();
    let mut examples = 0usize;
    let mut cpu = Duration::ZERO;
    let mut reps = 0;
    while reps < 3 || start.elapsed() < min_time {
        cpu += step()?;
        examples += batch;
        reps += 1;
    }
    let secs = cpu.as_secs_f64();
    if secs <= 0.0 {
        return Err(HarnessError::Calibration("no measurable compute time".into()));
    }
    Ok(examples as f64 / secs)
}

/// Speed factor that slows a worker with throughput `slow` so that a worker
/// with throughput `fast` is `ratio` times faster. Zero if it already is.
pub fn speed_factor_for_ratio(slow: f64, fast: f64, ratio: f64) -> f64 {
    (slow * ratio / fast - 1.0).max(0.0)
}
