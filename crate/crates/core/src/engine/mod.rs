//! The asynchronous training engine: one coordinator thread hands out
//! batches over message queues to heterogeneous worker threads that update a
//! shared model.

mod queue;
mod worker;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::dataset::{epoch_seed, shuffle_epoch, BatchRef, Dataset, DatasetError};
use crate::model::{Architecture, InitScheme, Model, ModelError};
use crate::policies::{PolicyConfig, PolicyDecision, PolicyError, Scheduler, WorkerId, WorkerProfile};

pub use queue::{MessageQueue, QueueClosed, Received};
pub use worker::{
    execute_batch_replica, execute_hogwild_sharded, partial_loss, replica_gradient, thread_cpu, StepOutcome,
    Throttle, EVAL_CHUNK,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("worker {worker} failed: {reason}")]
    WorkerFailed { worker: WorkerId, reason: String },
    #[error("could not start worker {worker}: {reason}")]
    Spawn { worker: WorkerId, reason: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("a worker queue closed unexpectedly")]
    Disconnected(#[from] QueueClosed),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerMode {
    /// A pool of Hogwild threads writing straight into the shared model.
    HogwildSharded,
    /// Computes on a private copy, then merges one gradient.
    BatchReplica,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaMode {
    Reference,
    DeepCopy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub mode: WorkerMode,
    pub threads: usize,
    /// Extra idle time per unit of compute time; 0 runs at full speed.
    pub speed_factor: f64,
    pub min_batch: usize,
    pub max_batch: usize,
    /// Test hook: fail on the batch with this zero-based index.
    #[doc(hidden)]
    pub fail_at_batch: Option<u64>,
}

impl WorkerConfig {
    pub fn sharded(threads: usize, min_batch: usize, max_batch: usize) -> Self {
        WorkerConfig {
            mode: WorkerMode::HogwildSharded,
            threads,
            speed_factor: 0.0,
            min_batch,
            max_batch,
            fail_at_batch: None,
        }
    }

    pub fn replica(threads: usize, min_batch: usize, max_batch: usize) -> Self {
        WorkerConfig {
            mode: WorkerMode::BatchReplica,
            ..Self::sharded(threads, min_batch, max_batch)
        }
    }

    pub fn with_speed_factor(mut self, speed_factor: f64) -> Self {
        self.speed_factor = speed_factor;
        self
    }

    pub fn replica_mode(&self) -> ReplicaMode {
        match self.mode {
            WorkerMode::HogwildSharded => ReplicaMode::Reference,
            WorkerMode::BatchReplica => ReplicaMode::DeepCopy,
        }
    }

    pub fn profile(&self, id: WorkerId) -> WorkerProfile {
        match self.mode {
            WorkerMode::HogwildSharded => WorkerProfile::sharded(id, self.threads, self.min_batch, self.max_batch),
            WorkerMode::BatchReplica => WorkerProfile::replica(id, self.min_batch, self.max_batch),
        }
    }

    fn validate(&self, id: WorkerId) -> Result<(), EngineError> {
        if self.threads == 0 {
            return Err(EngineError::Config(format!("worker {id}: threads must be >= 1")));
        }
        if !(self.speed_factor >= 0.0 && self.speed_factor.is_finite()) {
            return Err(EngineError::Config(format!(
                "worker {id}: speed factor {} must be finite and >= 0",
                self.speed_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCadence {
    /// After every k-th completed epoch.
    Epochs(usize),
    /// After every n completed batches (across all workers).
    Batches(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EndOfEpoch {
    /// Hand out the short tail of the epoch as a smaller batch.
    #[default]
    Drain,
    /// Only hand out full batches; a worker whose batch does not fit waits
    /// for the next epoch.
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub policy: PolicyConfig,
    pub base_eta: f64,
    /// Upper bound on batch-scaled learning rates.
    pub max_eta: Option<f64>,
    /// Update-count weight of each sharded (Hogwild) update.
    pub beta: f64,
    pub epochs: usize,
    /// Training-time budget; loss evaluation does not count against it.
    pub budget: Option<Duration>,
    pub seed: u64,
    pub init: InitScheme,
    pub loss_cadence: LossCadence,
    /// Draw a fresh permutation every epoch instead of reusing the first.
    pub reshuffle: bool,
    pub end_of_epoch: EndOfEpoch,
    /// Record every (epoch, worker, range) handed out.
    pub trace_assignments: bool,
}

impl TrainingConfig {
    pub fn new(policy: PolicyConfig, base_eta: f64) -> Self {
        TrainingConfig {
            policy,
            base_eta,
            max_eta: None,
            beta: 1.0,
            epochs: 1,
            budget: None,
            seed: 0,
            init: InitScheme::default(),
            loss_cadence: LossCadence::Epochs(1),
            reshuffle: true,
            end_of_epoch: EndOfEpoch::Drain,
            trace_assignments: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum MessageToCoordinator {
    /// Batch finished; `update_count` is the worker's running total.
    ScheduleWork {
        worker: WorkerId,
        update_count: f64,
        update_delta: f64,
        applied: usize,
        examples: usize,
        busy: Duration,
    },
    PartialLoss {
        worker: WorkerId,
        loss_sum: f64,
        examples: usize,
    },
    /// Acknowledges `Stop`; the worker sends nothing afterwards.
    Halt { worker: WorkerId },
    Failed { worker: WorkerId, reason: String },
}

#[derive(Debug, Clone)]
pub enum MessageToWorker {
    ExecuteWork {
        batch: BatchRef,
        learning_rate: f64,
        epoch: usize,
    },
    EvaluateLoss { model: Arc<Model>, batch: BatchRef },
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    /// Training time, evaluation pauses excluded.
    pub wall_ms: f64,
    /// Fractional epochs processed.
    pub epoch: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSizeEvent {
    pub wall_ms: f64,
    pub worker: WorkerId,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub epoch: usize,
    pub worker: WorkerId,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkerMetrics {
    /// Last update count the worker reported.
    pub update_count: f64,
    /// Sum of the deltas received, in arrival order.
    pub delta_sum: f64,
    /// Gradient updates actually written to the model.
    pub applied_updates: u64,
    pub batches: u64,
    pub examples: u64,
    /// Compute plus emulated slowdown.
    pub busy_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub samples: Vec<LossSample>,
    pub workers: Vec<WorkerMetrics>,
    pub batch_size_trace: Vec<BatchSizeEvent>,
    pub assignments: Vec<Assignment>,
    /// Training time, evaluation excluded.
    pub wall_ms: f64,
    pub eval_ms: f64,
    pub epochs_completed: usize,
    pub messages_to_workers: u64,
    pub messages_to_coordinator: u64,
    pub budget_exhausted: bool,
}

impl RunMetrics {
    pub fn final_loss(&self) -> Option<f64> {
        self.samples.last().map(|s| s.loss)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.samples.first().map(|s| s.loss)
    }

    pub fn update_counts(&self) -> Vec<f64> {
        self.workers.iter().map(|w| w.update_count).collect()
    }

    pub fn busy_ms(&self) -> Vec<f64> {
        self.workers.iter().map(|w| w.busy_ms).collect()
    }

    /// Training time at which the loss first dropped to `target` or below.
    pub fn time_to_loss(&self, target: f64) -> Option<f64> {
        self.samples.iter().find(|s| s.loss <= target).map(|s| s.wall_ms)
    }
}

/// Splits `total` rows proportionally to `weights` (largest remainder).
pub fn proportional_split(total: usize, weights: &[f64]) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let usable = weights.iter().all(|w| w.is_finite() && *w >= 0.0) && weights.iter().sum::<f64>() > 0.0;
    let weights: Vec<f64> = if usable { weights.to_vec() } else { vec![1.0; weights.len()] };
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut shares: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - shares.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    shares
}

/// Trains a freshly initialised model. See [`run_training_on`].
pub fn run_training(
    train: Arc<Dataset>,
    eval: Option<Arc<Dataset>>,
    arch: &Architecture,
    workers: &[WorkerConfig],
    config: &TrainingConfig,
) -> Result<RunMetrics, EngineError> {
    let model = Arc::new(Model::init(arch, config.seed, config.init));
    run_training_on(model, train, eval, workers, config)
}

/// Trains `model` in place. Loss is measured on `eval`, or on `train` in its
/// original order when `eval` is `None`.
pub fn run_training_on(
    model: Arc<Model>,
    train: Arc<Dataset>,
    eval: Option<Arc<Dataset>>,
    workers: &[WorkerConfig],
    config: &TrainingConfig,
) -> Result<RunMetrics, EngineError> {
    let eval = eval.unwrap_or_else(|| train.clone());
    validate(&model, &train, &eval, workers, config)?;
    let roster: Vec<WorkerProfile> = workers.iter().enumerate().map(|(i, w)| w.profile(i)).collect();
    let mut scheduler = Scheduler::new(config.policy, roster, config.base_eta)?;
    if let Some(cap) = config.max_eta {
        scheduler = scheduler.with_max_learning_rate(cap)?;
    }

    let inbox = Arc::new(MessageQueue::new());
    let mut outboxes = Vec::with_capacity(workers.len());
    let mut handles = Vec::with_capacity(workers.len());
    for (id, wc) in workers.iter().enumerate() {
        let outbox = Arc::new(MessageQueue::new());
        let spawned = spawn_worker(id, wc.clone(), config.beta, model.clone(), outbox.clone(), inbox.clone());
        match spawned {
            Ok(h) => {
                outboxes.push(outbox);
                handles.push(h);
            }
            Err(e) => {
                let mut c = Coordinator::new(config, model, train, eval, inbox, outboxes, scheduler);
                c.shutdown(handles);
                return Err(e);
            }
        }
    }

    let mut coordinator = Coordinator::new(config, model, train, eval, inbox, outboxes, scheduler);
    let result = coordinator.run();
    coordinator.shutdown(handles);
    result?;
    Ok(coordinator.metrics)
}

fn validate(
    model: &Model,
    train: &Dataset,
    eval: &Dataset,
    workers: &[WorkerConfig],
    config: &TrainingConfig,
) -> Result<(), EngineError> {
    let arch = model.arch();
    if workers.is_empty() {
        return Err(EngineError::Config("at least one worker is required".into()));
    }
    for (i, w) in workers.iter().enumerate() {
        w.validate(i)?;
    }
    for (what, ds) in [("training", train), ("evaluation", eval)] {
        if ds.is_empty() {
            return Err(EngineError::Config(format!("{what} data is empty")));
        }
        if ds.dim() != arch.input_dim() {
            return Err(EngineError::Config(format!(
                "{what} data has {} features, model expects {}",
                ds.dim(),
                arch.input_dim()
            )));
        }
        if ds.classes() > arch.classes() {
            return Err(EngineError::Config(format!(
                "{what} data has {} classes, model outputs {}",
                ds.classes(),
                arch.classes()
            )));
        }
    }
    if !(config.beta >= 0.0 && config.beta.is_finite()) {
        return Err(EngineError::Config(format!("beta {} must be finite and >= 0", config.beta)));
    }
    match config.loss_cadence {
        LossCadence::Epochs(0) | LossCadence::Batches(0) => {
            return Err(EngineError::Config("loss cadence must be >= 1".into()))
        }
        _ => {}
    }
    Ok(())
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

fn spawn_worker(
    id: WorkerId,
    config: WorkerConfig,
    beta: f64,
    global: Arc<Model>,
    inbox: Arc<MessageQueue<MessageToWorker>>,
    outbox: Arc<MessageQueue<MessageToCoordinator>>,
) -> Result<JoinHandle<()>, EngineError> {
    let pool = if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .thread_name(move |i| format!("hetsgd-w{id}-t{i}"))
            .build()
            .map_err(|e| EngineError::Spawn {
                worker: id,
                reason: e.to_string(),
            })?;
        Some(pool)
    } else {
        None
    };
    std::thread::Builder::new()
        .name(format!("hetsgd-worker-{id}"))
        .spawn(move || worker_loop(id, config, beta, global, pool, inbox, outbox))
        .map_err(|e| EngineError::Spawn {
            worker: id,
            reason: e.to_string(),
        })
}

fn worker_loop(
    id: WorkerId,
    config: WorkerConfig,
    beta: f64,
    global: Arc<Model>,
    pool: Option<rayon::ThreadPool>,
    inbox: Arc<MessageQueue<MessageToWorker>>,
    outbox: Arc<MessageQueue<MessageToCoordinator>>,
) {
    let replica = match config.replica_mode() {
        ReplicaMode::DeepCopy => Some(global.deep_copy()),
        ReplicaMode::Reference => None,
    };
    let mut throttle = Throttle::new(config.speed_factor);
    let mut update_count = 0.0;
    let mut batches = 0u64;
    while let Some(msg) = inbox.recv() {
        let reply = match msg {
            MessageToWorker::ExecuteWork {
                batch, learning_rate, ..
            } => {
                let start = Instant::now();
                let outcome = if config.fail_at_batch == Some(batches) {
                    Err("injected failure".to_string())
                } else {
                    let run = || match &replica {
                        None => execute_hogwild_sharded(
                            &global,
                            &batch,
                            config.threads,
                            pool.as_ref(),
                            learning_rate,
                            beta,
                        ),
                        Some(replica) => execute_batch_replica(
                            &global,
                            replica,
                            &batch,
                            config.threads,
                            pool.as_ref(),
                            learning_rate,
                        ),
                    };
                    match catch_unwind(AssertUnwindSafe(run)) {
                        Ok(r) => r.map_err(|e| e.to_string()),
                        Err(p) => Err(panic_message(p)),
                    }
                };
                batches += 1;
                match outcome {
                    Ok(out) => {
                        throttle.pay(out.cpu_time);
                        update_count += out.update_delta;
                        MessageToCoordinator::ScheduleWork {
                            worker: id,
                            update_count,
                            update_delta: out.update_delta,
                            applied: out.applied,
                            examples: batch.len(),
                            busy: start.elapsed(),
                        }
                    }
                    Err(reason) => MessageToCoordinator::Failed { worker: id, reason },
                }
            }
            MessageToWorker::EvaluateLoss { model, batch } => {
                match catch_unwind(AssertUnwindSafe(|| partial_loss(&model, &batch, pool.as_ref()))) {
                    Ok(Ok(loss_sum)) => MessageToCoordinator::PartialLoss {
                        worker: id,
                        loss_sum,
                        examples: batch.len(),
                    },
                    Ok(Err(e)) => MessageToCoordinator::Failed {
                        worker: id,
                        reason: e.to_string(),
                    },
                    Err(p) => MessageToCoordinator::Failed {
                        worker: id,
                        reason: panic_message(p),
                    },
                }
            }
            MessageToWorker::Stop => {
                let _ = outbox.send(MessageToCoordinator::Halt { worker: id });
                break;
            }
        };
        if outbox.send(reply).is_err() {
            break;
        }
    }
}

/// Wall clock with evaluation pauses cut out.
#[derive(Debug)]
struct TrainingClock {
    start: Instant,
    excluded: Duration,
}

impl TrainingClock {
    fn new() -> Self {
        TrainingClock {
            start: Instant::now(),
            excluded: Duration::ZERO,
        }
    }

    fn elapsed(&self) -> Duration {
        self.start.elapsed().saturating_sub(self.excluded)
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

struct Coordinator<'a> {
    config: &'a TrainingConfig,
    model: Arc<Model>,
    train: Arc<Dataset>,
    eval: Arc<Dataset>,
    inbox: Arc<MessageQueue<MessageToCoordinator>>,
    outboxes: Vec<Arc<MessageQueue<MessageToWorker>>>,
    scheduler: Scheduler,
    clock: TrainingClock,
    metrics: RunMetrics,
    in_flight: Vec<bool>,
    next: Vec<PolicyDecision>,
    epoch: usize,
    epoch_data: Arc<Dataset>,
    first_permutation: Option<Arc<Dataset>>,
    cursor: usize,
    processed: usize,
    batches_since_sample: u64,
    paused: bool,
    halting: bool,
}

impl<'a> Coordinator<'a> {
    fn new(
        config: &'a TrainingConfig,
        model: Arc<Model>,
        train: Arc<Dataset>,
        eval: Arc<Dataset>,
        inbox: Arc<MessageQueue<MessageToCoordinator>>,
        outboxes: Vec<Arc<MessageQueue<MessageToWorker>>>,
        scheduler: Scheduler,
    ) -> Self {
        let n = scheduler.roster().len();
        Coordinator {
            config,
            model,
            epoch_data: train.clone(),
            train,
            eval,
            inbox,
            outboxes,
            scheduler,
            clock: TrainingClock::new(),
            metrics: RunMetrics {
                workers: vec![WorkerMetrics::default(); n],
                ..RunMetrics::default()
            },
            in_flight: vec![false; n],
            next: Vec::with_capacity(n),
            epoch: 0,
            first_permutation: None,
            cursor: 0,
            processed: 0,
            batches_since_sample: 0,
            paused: false,
            halting: false,
        }
    }

    fn workers(&self) -> usize {
        self.outboxes.len()
    }

    fn send(&mut self, worker: WorkerId, msg: MessageToWorker) -> Result<(), EngineError> {
        self.outboxes[worker].send(msg)?;
        self.metrics.messages_to_workers += 1;
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<MessageToCoordinator>, EngineError> {
        let got = match timeout {
            Some(t) => self.inbox.recv_timeout(t),
            None => match self.inbox.recv() {
                Some(m) => Received::Message(m),
                None => Received::Closed,
            },
        };
        match got {
            Received::Message(m) => {
                self.metrics.messages_to_coordinator += 1;
                Ok(Some(m))
            }
            Received::Timeout => Ok(None),
            Received::Closed => Err(EngineError::Protocol("coordinator inbox closed".into())),
        }
    }

    fn budget_left(&self) -> Option<Duration> {
        self.config.budget.map(|b| b.saturating_sub(self.clock.elapsed()))
    }

    fn budget_spent(&self) -> bool {
        self.budget_left() == Some(Duration::ZERO)
    }

    fn begin_halt(&mut self) {
        if !self.halting {
            debug!("training budget spent, draining in-flight work");
        }
        self.halting = true;
        self.metrics.budget_exhausted = true;
    }

    fn run(&mut self) -> Result<(), EngineError> {
        for w in 0..self.workers() {
            let d = self.scheduler.current(w)?;
            self.metrics.batch_size_trace.push(BatchSizeEvent {
                wall_ms: 0.0,
                worker: w,
                batch_size: d.batch_size,
            });
            self.next.push(d);
        }
        self.clock = TrainingClock::new();
        self.sample_loss()?;
        for epoch in 0..self.config.epochs {
            if self.budget_spent() {
                self.begin_halt();
                break;
            }
            self.begin_epoch(epoch);
            for w in 0..self.workers() {
                self.dispatch(w)?;
            }
            self.drive_epoch()?;
            if self.halting {
                break;
            }
            self.metrics.epochs_completed += 1;
            self.processed = 0;
            if let LossCadence::Epochs(k) = self.config.loss_cadence {
                if (epoch + 1) % k == 0 {
                    self.sample_loss()?;
                }
            }
            info!(
                "epoch {} done at {:.0} ms, loss {:.6}",
                epoch + 1,
                ms(self.clock.elapsed()),
                self.metrics.final_loss().unwrap_or(f64::NAN)
            );
        }
        self.metrics.wall_ms = ms(self.clock.elapsed());
        if self.batches_since_sample > 0 {
            self.sample_loss()?;
        }
        Ok(())
    }

    fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.cursor = 0;
        self.processed = 0;
        self.epoch_data = match (&self.first_permutation, self.config.reshuffle) {
            (Some(data), false) => data.clone(),
            _ => {
                let perm = shuffle_epoch(&self.train, epoch_seed(self.config.seed, epoch as u64));
                let data = Arc::new(self.train.permuted(&perm));
                if self.first_permutation.is_none() && !self.config.reshuffle {
                    self.first_permutation = Some(data.clone());
                }
                data
            }
        };
    }

    fn in_flight_count(&self) -> usize {
        self.in_flight.iter().filter(|&&f| f).count()
    }

    fn drive_epoch(&mut self) -> Result<(), EngineError> {
        loop {
            if self.in_flight_count() == 0 {
                if self.paused && !self.halting && self.cursor < self.epoch_data.len() {
                    self.paused = false;
                    self.sample_loss()?;
                    for w in 0..self.workers() {
                        self.dispatch(w)?;
                    }
                    if self.in_flight_count() > 0 {
                        continue;
                    }
                }
                self.paused = false;
                return Ok(());
            }
            let timeout = if self.halting { None } else { self.budget_left() };
            match self.recv(timeout)? {
                Some(msg) => self.handle(msg)?,
                None => self.begin_halt(),
            }
        }
    }

    fn handle(&mut self, msg: MessageToCoordinator) -> Result<(), EngineError> {
        match msg {
            MessageToCoordinator::ScheduleWork {
                worker,
                update_count,
                update_delta,
                applied,
                examples,
                busy,
            } => {
                if !self.in_flight.get(worker).copied().unwrap_or(false) {
                    return Err(EngineError::Protocol(format!("unsolicited report from worker {worker}")));
                }
                self.in_flight[worker] = false;
                let m = &mut self.metrics.workers[worker];
                m.update_count = update_count;
                m.delta_sum += update_delta;
                m.applied_updates += applied as u64;
                m.batches += 1;
                m.examples += examples as u64;
                m.busy_ms += ms(busy);
                self.processed += examples;
                self.batches_since_sample += 1;

                let decision = self.scheduler.on_report(worker, update_count)?;
                if decision.batch_size != self.next[worker].batch_size {
                    debug!(
                        "worker {worker}: batch {} -> {}",
                        self.next[worker].batch_size, decision.batch_size
                    );
                    self.metrics.batch_size_trace.push(BatchSizeEvent {
                        wall_ms: ms(self.clock.elapsed()),
                        worker,
                        batch_size: decision.batch_size,
                    });
                }
                self.next[worker] = decision;
                if self.budget_spent() {
                    self.begin_halt();
                }
                if let LossCadence::Batches(n) = self.config.loss_cadence {
                    if self.batches_since_sample >= n as u64 {
                        self.paused = true;
                    }
                }
                if !self.halting && !self.paused {
                    self.dispatch(worker)?;
                }
                Ok(())
            }
            MessageToCoordinator::Failed { worker, reason } => Err(EngineError::WorkerFailed { worker, reason }),
            other => Err(EngineError::Protocol(format!("unexpected message during training: {other:?}"))),
        }
    }

    fn dispatch(&mut self, worker: WorkerId) -> Result<(), EngineError> {
        let remaining = self.epoch_data.len() - self.cursor;
        if remaining == 0 || self.in_flight[worker] {
            return Ok(());
        }
        let decision = self.next[worker];
        let len = if decision.batch_size <= remaining {
            decision.batch_size
        } else {
            match self.config.end_of_epoch {
                EndOfEpoch::Drain => remaining,
                EndOfEpoch::Strict => return Ok(()),
            }
        };
        let batch = BatchRef::new(self.epoch_data.clone(), self.cursor, len)?;
        if self.config.trace_assignments {
            self.metrics.assignments.push(Assignment {
                epoch: self.epoch,
                worker,
                start: self.cursor,
                len,
            });
        }
        self.cursor += len;
        self.send(
            worker,
            MessageToWorker::ExecuteWork {
                batch,
                learning_rate: decision.learning_rate,
                epoch: self.epoch,
            },
        )?;
        self.in_flight[worker] = true;
        Ok(())
    }

    fn sample_loss(&mut self) -> Result<(), EngineError> {
        let wall_ms = ms(self.clock.elapsed());
        let epoch = self.metrics.epochs_completed as f64 + self.processed as f64 / self.train.len() as f64;
        let started = Instant::now();
        let loss = self.evaluate_loss_parallel();
        let spent = started.elapsed();
        self.clock.excluded += spent;
        self.metrics.eval_ms += ms(spent);
        let loss = loss?;
        if let Some(last) = self.metrics.samples.last() {
            if wall_ms <= last.wall_ms {
                warn!("dropping loss sample with non-increasing time {wall_ms}");
                return Ok(());
            }
        }
        self.metrics.samples.push(LossSample { wall_ms, epoch, loss });
        self.batches_since_sample = 0;
        Ok(())
    }

    /// Mean loss of a frozen copy of the model over the evaluation data,
    /// split across workers in proportion to their measured throughput.
    fn evaluate_loss_parallel(&mut self) -> Result<f64, EngineError> {
        let frozen = Arc::new(self.model.deep_copy());
        let weights: Vec<f64> = self
            .metrics
            .workers
            .iter()
            .map(|w| if w.busy_ms > 0.0 { w.examples as f64 / w.busy_ms } else { 0.0 })
            .collect();
        let weights = if weights.iter().all(|&w| w > 0.0) {
            weights
        } else {
            vec![1.0; weights.len()]
        };
        let shares = proportional_split(self.eval.len(), &weights);
        let mut start = 0;
        let mut expected = 0;
        for (w, &rows) in shares.iter().enumerate() {
            if rows == 0 {
                continue;
            }
            let batch = BatchRef::new(self.eval.clone(), start, rows)?;
            start += rows;
            self.send(
                w,
                MessageToWorker::EvaluateLoss {
                    model: frozen.clone(),
                    batch,
                },
            )?;
            expected += 1;
        }
        let mut partial = vec![0.0; self.workers()];
        let mut count = 0usize;
        while expected > 0 {
            match self.recv(None)? {
                Some(MessageToCoordinator::PartialLoss {
                    worker,
                    loss_sum,
                    examples,
                }) => {
                    partial[worker] = loss_sum;
                    count += examples;
                    expected -= 1;
                }
                Some(MessageToCoordinator::Failed { worker, reason }) => {
                    return Err(EngineError::WorkerFailed { worker, reason })
                }
                Some(other) => {
                    return Err(EngineError::Protocol(format!("unexpected message during evaluation: {other:?}")))
                }
                None => unreachable!("blocking receive"),
            }
        }
        Ok(partial.iter().sum::<f64>() / count as f64)
    }

    /// Stops every worker, waits for its acknowledgement and joins it.
    fn shutdown(&mut self, handles: Vec<JoinHandle<()>>) {
        let mut live = 0;
        for w in 0..self.outboxes.len() {
            if self.outboxes[w].send(MessageToWorker::Stop).is_ok() {
                self.metrics.messages_to_workers += 1;
                live += 1;
            }
            self.outboxes[w].close();
        }
        let mut halted = 0;
        while halted < live {
            match self.inbox.recv_timeout(Duration::from_secs(60)) {
                Received::Message(MessageToCoordinator::Halt { .. }) => {
                    self.metrics.messages_to_coordinator += 1;
                    halted += 1;
                }
                Received::Message(_) => self.metrics.messages_to_coordinator += 1,
                Received::Timeout | Received::Closed => {
                    warn!("{} workers did not acknowledge stop", live - halted);
                    break;
                }
            }
        }
        self.inbox.close();
        for h in handles {
            if h.join().is_err() {
                warn!("a worker thread panicked");
            }
        }
    }
}
