//! What a worker does with one batch, independent of threads and queues.

use std::time::{Duration, Instant};

use cpu_time::ThreadTime;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::dataset::BatchRef;
use crate::model::{apply_update, backward, forward, loss_sum, Gradient, Model, ModelError};

/// Rows per forward pass when evaluating loss; bounds the activation memory.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Contribution to the worker's update count.
    pub update_delta: f64,
    /// Gradient updates written to the shared model.
    pub applied: usize,
    /// CPU time spent computing, summed over the threads involved. Unlike
    /// wall time it does not grow while a thread waits for a busy core.
    pub cpu_time: Duration,
}

/// Runs `f` and reports the CPU time the calling thread spent in it.
pub fn thread_cpu<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let start = ThreadTime::now();
    let r = f();
    (r, start.elapsed())
}

fn step_on(global: &Model, part: &BatchRef, eta: f64) -> Result<Duration, ModelError> {
    let (r, cpu) = thread_cpu(|| {
        let tape = forward(global, part.features())?;
        let grad = backward(global, &tape, part.labels())?;
        apply_update(global, &grad, eta)
    });
    r.map(|()| cpu)
}

/// Hogwild over `threads` pieces of `batch`: every piece computes its gradient
/// against the live shared model and writes it back without locking.
///
/// Pieces that would be empty are dropped, so a batch smaller than the pool
/// yields fewer updates.
pub fn execute_hogwild_sharded(
    global: &Model,
    batch: &BatchRef,
    threads: usize,
    pool: Option<&ThreadPool>,
    eta: f64,
    beta: f64,
) -> Result<StepOutcome, ModelError> {
    let parts = batch.split(threads.max(1));
    let times: Vec<Duration> = match pool {
        Some(pool) if parts.len() > 1 => {
            pool.install(|| parts.par_iter().map(|p| step_on(global, p, eta)).collect::<Result<_, _>>())?
        }
        _ => parts.iter().map(|p| step_on(global, p, eta)).collect::<Result<_, _>>()?,
    };
    Ok(StepOutcome {
        update_delta: parts.len() as f64 * beta,
        applied: parts.len(),
        cpu_time: times.iter().sum(),
    })
}

/// Mean gradient of `batch` against `model`. With more than one thread the
/// batch is chunked and the chunk gradients are recombined with weights
/// `n_c / n`, which equals the whole-batch mean up to rounding.
pub fn replica_gradient(
    model: &Model,
    batch: &BatchRef,
    threads: usize,
    pool: Option<&ThreadPool>,
) -> Result<Gradient, ModelError> {
    replica_gradient_timed(model, batch, threads, pool).map(|(g, _)| g)
}

fn gradient_of(model: &Model, part: &BatchRef) -> Result<(Gradient, Duration), ModelError> {
    let (r, cpu) = thread_cpu(|| {
        let tape = forward(model, part.features())?;
        backward(model, &tape, part.labels())
    });
    r.map(|g| (g, cpu))
}

fn replica_gradient_timed(
    model: &Model,
    batch: &BatchRef,
    threads: usize,
    pool: Option<&ThreadPool>,
) -> Result<(Gradient, Duration), ModelError> {
    let pool = match pool {
        Some(p) if threads > 1 && batch.len() > 1 => p,
        _ => return gradient_of(model, batch),
    };
    let parts = batch.split(threads);
    let grads: Vec<(Gradient, Duration)> =
        pool.install(|| parts.par_iter().map(|p| gradient_of(model, p)).collect::<Result<_, _>>())?;
    let (mut total, combine) = thread_cpu(|| Gradient::zeros_like(model));
    let n = batch.len() as f64;
    let mut cpu = combine;
    for ((g, t), p) in grads.iter().zip(&parts) {
        let (r, c) = thread_cpu(|| total.add_scaled(g, p.len() as f64 / n));
        r?;
        cpu += *t + c;
    }
    Ok((total, cpu))
}

/// Deep-copy, compute, merge. `replica` is the worker's private buffer and
/// `global` may be modified by others between the copy and the merge.
/// The update delta is always 1.
pub fn execute_batch_replica(
    global: &Model,
    replica: &Model,
    batch: &BatchRef,
    threads: usize,
    pool: Option<&ThreadPool>,
    eta: f64,
) -> Result<StepOutcome, ModelError> {
    let ((), copy) = thread_cpu(|| replica.copy_from(global));
    let (grad, compute) = replica_gradient_timed(replica, batch, threads, pool)?;
    let (merged, merge) = thread_cpu(|| apply_update(global, &grad, eta));
    merged?;
    Ok(StepOutcome {
        update_delta: 1.0,
        applied: 1,
        cpu_time: copy + compute + merge,
    })
}

/// Summed (not averaged) cross-entropy over `batch`, in chunks of at most
/// [`EVAL_CHUNK`] rows. Chunk sums are added in row order.
pub fn partial_loss(model: &Model, batch: &BatchRef, pool: Option<&ThreadPool>) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let chunks = batch.len().div_ceil(EVAL_CHUNK);
    let pieces: Vec<BatchRef> = (0..chunks)
        .map(|c| {
            let off = c * EVAL_CHUNK;
            batch.slice(off, EVAL_CHUNK.min(batch.len() - off))
        })
        .collect();
    let eval = |p: &BatchRef| -> Result<f64, ModelError> {
        let tape = forward(model, p.features())?;
        loss_sum(&tape, p.labels())
    };
    let sums: Vec<f64> = match pool {
        Some(pool) if pieces.len() > 1 => pool.install(|| pieces.par_iter().map(eval).collect::<Result<_, _>>())?,
        _ => pieces.iter().map(eval).collect::<Result<_, _>>()?,
    };
    Ok(sums.iter().sum())
}

/// Emulates a slower device: after `compute` seconds of real work the worker
/// additionally idles `factor * compute`. Short sleeps are batched into a debt
/// so that timer granularity does not distort small batches.
#[derive(Debug, Clone)]
pub struct Throttle {
    factor: f64,
    debt: f64,
}

const MIN_SLEEP: f64 = 500e-6;

impl Throttle {
    pub fn new(factor: f64) -> Self {
        Throttle {
            factor: factor.max(0.0),
            debt: 0.0,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    /// Seconds still owed.
    pub fn debt(&self) -> f64 {
        self.debt
    }

    pub fn pay(&mut self, compute: Duration) {
        if self.factor == 0.0 {
            return;
        }
        self.debt += self.factor * compute.as_secs_f64();
        if self.debt >= MIN_SLEEP {
            let start = Instant::now();
            std::thread::sleep(Duration::from_secs_f64(self.debt));
            // oversleep becomes credit
            self.debt -= start.elapsed().as_secs_f64();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_blobs, Dataset};
    use crate::model::{cross_entropy_loss, Architecture, InitScheme};
    use std::sync::Arc;

    fn setup(n: usize) -> (Arc<Dataset>, Model) {
        let ds = Arc::new(synthetic_blobs(n, 5, 3, 2.0, 3).unwrap());
        let arch = Architecture::new(vec![5, 6, 3]).unwrap();
        (ds, Model::init(&arch, 11, InitScheme::ScaledGaussian))
    }

    fn pool(t: usize) -> ThreadPool {
        rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap()
    }

    #[test]
    fn single_thread_sharded_equals_plain_step() {
        let (ds, m) = setup(40);
        let reference = m.deep_copy();
        let batch = BatchRef::new(ds, 3, 17).unwrap();
        let out = execute_hogwild_sharded(&m, &batch, 1, None, 0.3, 1.0).unwrap();
        assert_eq!(out.applied, 1);
        step_on(&reference, &batch, 0.3).unwrap();
        assert!(m.bitwise_eq(&reference));
    }

    #[test]
    fn sharded_counts_parts_times_beta() {
        let (ds, m) = setup(40);
        let p = pool(4);
        let out = execute_hogwild_sharded(&m, &BatchRef::new(ds.clone(), 0, 40).unwrap(), 4, Some(&p), 0.1, 0.5).unwrap();
        assert_eq!(out.applied, 4);
        assert_eq!(out.update_delta, 2.0);
        // fewer rows than threads
        let out = execute_hogwild_sharded(&m, &BatchRef::new(ds, 0, 3).unwrap(), 4, Some(&p), 0.1, 1.0).unwrap();
        assert_eq!(out.applied, 3);
    }

    #[test]
    fn chunked_replica_gradient_matches_whole_batch() {
        let (ds, m) = setup(64);
        let batch = BatchRef::new(ds, 0, 61).unwrap();
        let whole = replica_gradient(&m, &batch, 1, None).unwrap();
        let p = pool(4);
        let chunked = replica_gradient(&m, &batch, 4, Some(&p)).unwrap();
        for (a, b) in whole.layers().iter().zip(chunked.layers()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn replica_merge_uses_the_copy_not_the_live_model() {
        let (ds, global) = setup(30);
        let replica = global.deep_copy();
        let batch = BatchRef::new(ds, 0, 30).unwrap();
        let g = replica_gradient(&global, &batch, 1, None).unwrap();
        let expect = global.deep_copy();
        apply_update(&expect, &g, 0.2).unwrap();
        let out = execute_batch_replica(&global, &replica, &batch, 1, None, 0.2).unwrap();
        assert_eq!((out.update_delta, out.applied), (1.0, 1));
        assert!(out.cpu_time > Duration::ZERO);
        assert!(global.bitwise_eq(&expect));
    }

    #[test]
    fn partial_loss_single_chunk_is_bit_equal_to_loss() {
        let (ds, m) = setup(100);
        let batch = BatchRef::new(ds.clone(), 0, 100).unwrap();
        let tape = forward(&m, ds.features().view()).unwrap();
        let mean = cross_entropy_loss(&tape, ds.labels()).unwrap();
        assert_eq!(partial_loss(&m, &batch, None).unwrap() / 100.0, mean);
    }

    #[test]
    fn partial_loss_over_many_chunks() {
        let (ds, m) = setup(2 * EVAL_CHUNK + 7);
        let batch = BatchRef::new(ds.clone(), 0, ds.len()).unwrap();
        let tape = forward(&m, ds.features().view()).unwrap();
        let whole = loss_sum(&tape, ds.labels()).unwrap();
        let p = pool(3);
        let chunked = partial_loss(&m, &batch, Some(&p)).unwrap();
        assert!((whole - chunked).abs() <= 1e-9 * whole.abs());
    }

    #[test]
    fn throttle_factor_one_roughly_doubles_time() {
        let mut t = Throttle::new(1.0);
        let work = Duration::from_millis(20);
        let start = Instant::now();
        std::thread::sleep(work);
        let compute = start.elapsed();
        t.pay(compute);
        let total = start.elapsed().as_secs_f64();
        let ratio = total / compute.as_secs_f64();
        assert!((1.8..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn throttle_accumulates_small_debts() {
        let mut t = Throttle::new(2.0);
        t.pay(Duration::from_micros(100));
        assert!((t.debt() - 200e-6).abs() < 1e-12);
        t.pay(Duration::from_micros(200));
        assert!(t.debt() <= 0.0 + 1e-3);
        let mut off = Throttle::new(0.0);
        off.pay(Duration::from_secs(1));
        assert_eq!(off.debt(), 0.0);
    }
}
