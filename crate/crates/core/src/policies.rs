//! Batch-size and learning-rate policies consulted by the coordinator when it
//! answers a `ScheduleWork` request.
//!
//! Everything here is plain single-threaded decision logic; the coordinator
//! owns the only mutable [`Scheduler`].

use thiserror::Error;

pub type WorkerId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error("worker {worker}: batch thresholds [{min}, {max}] are invalid")]
    Thresholds { worker: WorkerId, min: usize, max: usize },
    #[error("alpha must be > 1, got {0}")]
    Alpha(f64),
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("learning rate must be finite and > 0, got {0}")]
    LearningRate(f64),
    #[error("worker {worker} reported {reported} updates after {previous}")]
    NonMonotonic {
        worker: WorkerId,
        previous: f64,
        reported: f64,
    },
}

/// How a worker consumes a batch, as far as the policies care.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerClass {
    /// Hogwild pool: the batch is split over `threads` concurrent updaters.
    Sharded { threads: usize },
    /// One gradient per batch, merged into the global model.
    Replica,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerProfile {
    pub id: WorkerId,
    pub class: WorkerClass,
    pub min_batch: usize,
    pub max_batch: usize,
}

impl WorkerProfile {
    pub fn sharded(id: WorkerId, threads: usize, min_batch: usize, max_batch: usize) -> Self {
        WorkerProfile {
            id,
            class: WorkerClass::Sharded { threads },
            min_batch,
            max_batch,
        }
    }

    pub fn replica(id: WorkerId, min_batch: usize, max_batch: usize) -> Self {
        WorkerProfile {
            id,
            class: WorkerClass::Replica,
            min_batch,
            max_batch,
        }
    }

    /// Examples behind each individual model update for a batch of `b`.
    pub fn examples_per_update(&self, b: usize) -> f64 {
        match self.class {
            WorkerClass::Sharded { threads } => (b as f64 / threads.max(1) as f64).max(1.0),
            WorkerClass::Replica => b as f64,
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.min_batch == 0 || self.min_batch > self.max_batch {
            return Err(PolicyError::Thresholds {
                worker: self.id,
                min: self.min_batch,
                max: self.max_batch,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyDecision {
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Learning rate proportional to the number of examples behind each update:
/// `eta = base_eta * examples_per_update / reference_batch`, optionally
/// capped at `max_eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRateRule {
    pub base_eta: f64,
    pub reference_batch: f64,
    pub max_eta: Option<f64>,
}

impl LearningRateRule {
    /// The reference is the smallest per-update batch any worker may use.
    pub fn for_roster(base_eta: f64, roster: &[WorkerProfile]) -> Self {
        let reference_batch = roster
            .iter()
            .map(|p| p.examples_per_update(p.min_batch))
            .fold(f64::INFINITY, f64::min);
        LearningRateRule {
            base_eta,
            reference_batch: if reference_batch.is_finite() { reference_batch } else { 1.0 },
            max_eta: None,
        }
    }

    pub fn rate(&self, profile: &WorkerProfile, batch: usize) -> f64 {
        let eta = self.base_eta * profile.examples_per_update(batch) / self.reference_batch;
        self.max_eta.map_or(eta, |cap| eta.min(cap))
    }
}

/// Hogbatch: every worker gets the same batch size and learning rate.
pub fn uniform_hogbatch(fixed_batch: usize, eta: f64) -> Result<PolicyDecision, PolicyError> {
    if fixed_batch == 0 {
        return Err(PolicyError::ZeroBatch);
    }
    Ok(PolicyDecision {
        batch_size: fixed_batch,
        learning_rate: eta,
    })
}

/// Static per-class batch sizes: sharded pools get `threads *
/// batch_per_thread`, replica workers get `replica_batch`.
pub fn fixed_heterogeneous(
    roster: &[WorkerProfile],
    worker: WorkerId,
    batch_per_thread: usize,
    replica_batch: usize,
    rule: &LearningRateRule,
) -> Result<PolicyDecision, PolicyError> {
    if batch_per_thread == 0 || replica_batch == 0 {
        return Err(PolicyError::ZeroBatch);
    }
    let profile = roster
        .iter()
        .find(|p| p.id == worker)
        .ok_or(PolicyError::UnknownWorker(worker))?;
    let batch_size = match profile.class {
        WorkerClass::Sharded { threads } => threads * batch_per_thread,
        WorkerClass::Replica => replica_batch,
    };
    Ok(PolicyDecision {
        batch_size,
        learning_rate: rule.rate(profile, batch_size),
    })
}

/// Starting batch sizes for the adaptive policy: replica workers at their
/// upper threshold, sharded pools at one example per thread.
pub fn initial_sizes(roster: &[WorkerProfile]) -> Vec<usize> {
    roster
        .iter()
        .map(|p| match p.class {
            WorkerClass::Replica => p.max_batch,
            WorkerClass::Sharded { threads } => threads.clamp(p.min_batch, p.max_batch),
        })
        .collect()
}

/// How `min_u` / `max_u` are maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Running scalars, reassigned only by the worker that crosses them.
    #[default]
    Literal,
    /// Recomputed on every report as the min / max over all other workers
    /// that have reported at least once.
    StrictRecompute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWorker {
    pub batch: usize,
    pub updates: f64,
    pub min_batch: usize,
    pub max_batch: usize,
    pub reported: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    alpha: f64,
    mode: ThresholdMode,
    min_u: f64,
    max_u: f64,
    workers: Vec<AdaptiveWorker>,
}

/// Outcome of one adaptive step, kept for tracing and property tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveStep {
    pub previous_batch: usize,
    /// Batch size after scaling by alpha but before clamping.
    pub unclamped_batch: usize,
    pub batch: usize,
}

impl AdaptiveState {
    pub fn new(roster: &[WorkerProfile], alpha: f64, mode: ThresholdMode) -> Result<Self, PolicyError> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(PolicyError::Alpha(alpha));
        }
        for p in roster {
            p.validate()?;
        }
        let workers = roster
            .iter()
            .zip(initial_sizes(roster))
            .map(|(p, batch)| AdaptiveWorker {
                batch,
                updates: 0.0,
                min_batch: p.min_batch,
                max_batch: p.max_batch,
                reported: false,
            })
            .collect();
        Ok(AdaptiveState {
            alpha,
            mode,
            min_u: 0.0,
            max_u: 0.0,
            workers,
        })
    }

    /// State for a single worker whose earlier reports are already
    /// accounted for, with explicit thresholds. Mostly useful in tests.
    pub fn single(
        batch: usize,
        min_batch: usize,
        max_batch: usize,
        alpha: f64,
        min_u: f64,
        max_u: f64,
    ) -> Result<Self, PolicyError> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(PolicyError::Alpha(alpha));
        }
        if min_batch == 0 || min_batch > max_batch {
            return Err(PolicyError::Thresholds {
                worker: 0,
                min: min_batch,
                max: max_batch,
            });
        }
        Ok(AdaptiveState {
            alpha,
            mode: ThresholdMode::Literal,
            min_u,
            max_u,
            workers: vec![AdaptiveWorker {
                batch: batch.clamp(min_batch, max_batch),
                updates: 0.0,
                min_batch,
                max_batch,
                reported: true,
            }],
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }

    pub fn min_u(&self) -> f64 {
        self.min_u
    }

    pub fn max_u(&self) -> f64 {
        self.max_u
    }

    pub fn worker(&self, id: WorkerId) -> Option<&AdaptiveWorker> {
        self.workers.get(id)
    }

    pub fn batch(&self, id: WorkerId) -> Option<usize> {
        self.workers.get(id).map(|w| w.batch)
    }

    fn shrink(&self, b: usize) -> usize {
        (b as f64 / self.alpha).floor() as usize
    }

    fn grow(&self, b: usize) -> usize {
        let grown = (b as f64 * self.alpha).floor();
        if grown >= usize::MAX as f64 {
            usize::MAX
        } else {
            grown as usize
        }
    }

    /// Handles a `ScheduleWork` report of `reported_u` cumulative updates.
    ///
    /// The first report of each worker only seeds the bookkeeping; the
    /// batch size is left alone.
    pub fn update(&mut self, worker: WorkerId, reported_u: f64) -> Result<AdaptiveStep, PolicyError> {
        let w = self.workers.get(worker).ok_or(PolicyError::UnknownWorker(worker))?;
        if reported_u < w.updates {
            return Err(PolicyError::NonMonotonic {
                worker,
                previous: w.updates,
                reported: reported_u,
            });
        }
        let first_report = !w.reported;
        let previous_batch = w.batch;

        if self.mode == ThresholdMode::StrictRecompute {
            let others = self
                .workers
                .iter()
                .enumerate()
                .filter(|(i, o)| *i != worker && o.reported)
                .map(|(_, o)| o.updates);
            let (lo, hi) = others.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u), hi.max(u)));
            if lo.is_finite() {
                self.min_u = lo;
                self.max_u = hi;
            } else {
                // nobody to compare against yet
                self.min_u = reported_u;
                self.max_u = reported_u;
            }
        }

        let mut unclamped = previous_batch;
        let mut batch = previous_batch;
        if reported_u < self.min_u {
            if !first_report {
                unclamped = self.shrink(previous_batch);
                batch = unclamped.max(self.workers[worker].min_batch);
            }
            if self.mode == ThresholdMode::Literal {
                self.min_u = reported_u;
            }
        } else if reported_u > self.max_u {
            if !first_report {
                unclamped = self.grow(previous_batch);
                batch = unclamped.min(self.workers[worker].max_batch);
            }
            if self.mode == ThresholdMode::Literal {
                self.max_u = reported_u;
            }
        }

        let w = &mut self.workers[worker];
        w.batch = batch.max(1);
        w.updates = reported_u;
        w.reported = true;
        Ok(AdaptiveStep {
            previous_batch,
            unclamped_batch: unclamped,
            batch: w.batch,
        })
    }
}

/// Adaptive handler: adjust the reporting worker's batch size and derive its
/// learning rate from the new size.
pub fn adaptive_update(
    state: &mut AdaptiveState,
    profile: &WorkerProfile,
    reported_u: f64,
    rule: &LearningRateRule,
) -> Result<PolicyDecision, PolicyError> {
    let step = state.update(profile.id, reported_u)?;
    Ok(PolicyDecision {
        batch_size: step.batch,
        learning_rate: rule.rate(profile, step.batch),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyConfig {
    /// Hogbatch: the same batch size for everyone, constant learning rate.
    Uniform { batch: usize },
    /// CPU+GPU Hogbatch with static per-class batch sizes.
    FixedHeterogeneous {
        batch_per_thread: usize,
        replica_batch: usize,
    },
    /// Adaptive Hogbatch.
    Adaptive { alpha: f64, mode: ThresholdMode },
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Uniform { .. } => "uniform",
            PolicyConfig::FixedHeterogeneous { .. } => "fixed",
            PolicyConfig::Adaptive { .. } => "adaptive",
        }
    }
}

/// The coordinator's policy state: one object answering every report.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: PolicyConfig,
    roster: Vec<WorkerProfile>,
    base_eta: f64,
    rule: LearningRateRule,
    adaptive: Option<AdaptiveState>,
}

impl Scheduler {
    /// `roster[i].id` must equal `i`.
    pub fn new(config: PolicyConfig, roster: Vec<WorkerProfile>, base_eta: f64) -> Result<Self, PolicyError> {
        if !(base_eta > 0.0 && base_eta.is_finite()) {
            return Err(PolicyError::LearningRate(base_eta));
        }
        for (i, p) in roster.iter().enumerate() {
            if p.id != i {
                return Err(PolicyError::UnknownWorker(p.id));
            }
            p.validate()?;
        }
        let adaptive = match config {
            PolicyConfig::Uniform { batch: 0 } => return Err(PolicyError::ZeroBatch),
            PolicyConfig::FixedHeterogeneous {
                batch_per_thread,
                replica_batch,
            } if batch_per_thread == 0 || replica_batch == 0 => return Err(PolicyError::ZeroBatch),
            PolicyConfig::Adaptive { alpha, mode } => Some(AdaptiveState::new(&roster, alpha, mode)?),
            _ => None,
        };
        let rule = LearningRateRule::for_roster(base_eta, &roster);
        Ok(Scheduler {
            config,
            roster,
            base_eta,
            rule,
            adaptive,
        })
    }

    /// Caps every scaled learning rate at `max_eta`. The uniform policy's
    /// constant rate is left alone.
    pub fn with_max_learning_rate(mut self, max_eta: f64) -> Result<Self, PolicyError> {
        if !(max_eta > 0.0 && max_eta.is_finite()) {
            return Err(PolicyError::LearningRate(max_eta));
        }
        self.rule.max_eta = Some(max_eta);
        Ok(self)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn roster(&self) -> &[WorkerProfile] {
        &self.roster
    }

    pub fn learning_rate_rule(&self) -> &LearningRateRule {
        &self.rule
    }

    pub fn adaptive_state(&self) -> Option<&AdaptiveState> {
        self.adaptive.as_ref()
    }

    fn profile(&self, worker: WorkerId) -> Result<&WorkerProfile, PolicyError> {
        self.roster.get(worker).ok_or(PolicyError::UnknownWorker(worker))
    }

    /// The decision in force for `worker` without consuming a report.
    pub fn current(&self, worker: WorkerId) -> Result<PolicyDecision, PolicyError> {
        let profile = self.profile(worker)?;
        match self.config {
            PolicyConfig::Uniform { batch } => uniform_hogbatch(batch, self.base_eta),
            PolicyConfig::FixedHeterogeneous {
                batch_per_thread,
                replica_batch,
            } => fixed_heterogeneous(&self.roster, worker, batch_per_thread, replica_batch, &self.rule),
            PolicyConfig::Adaptive { .. } => {
                let state = self.adaptive.as_ref().expect("adaptive state");
                let batch = state.batch(worker).ok_or(PolicyError::UnknownWorker(worker))?;
                Ok(PolicyDecision {
                    batch_size: batch,
                    learning_rate: self.rule.rate(profile, batch),
                })
            }
        }
    }

    /// Processes a `ScheduleWork(worker, u)` report.
    pub fn on_report(&mut self, worker: WorkerId, reported_u: f64) -> Result<PolicyDecision, PolicyError> {
        match self.config {
            PolicyConfig::Adaptive { .. } => {
                let profile = self.roster.get(worker).ok_or(PolicyError::UnknownWorker(worker))?;
                let state = self.adaptive.as_mut().expect("adaptive state");
                adaptive_update(state, profile, reported_u, &self.rule)
            }
            _ => self.current(worker),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_is_identical_for_everyone() {
        let d = uniform_hogbatch(8192, 0.1).unwrap();
        assert_eq!(d.batch_size, 8192);
        let roster = vec![WorkerProfile::sharded(0, 4, 4, 256), WorkerProfile::replica(1, 64, 8192)];
        let mut s = Scheduler::new(PolicyConfig::Uniform { batch: 32 }, roster, 0.1).unwrap();
        let a = s.on_report(0, 10.0).unwrap();
        let b = s.on_report(1, 1000.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, s.current(0).unwrap());
        assert_eq!(a.learning_rate, 0.1);
        assert!(uniform_hogbatch(0, 0.1).is_err());
    }

    #[test]
    fn fixed_heterogeneous_sizes_and_rates() {
        let roster = vec![WorkerProfile::sharded(0, 48, 48, 48 * 64), WorkerProfile::replica(1, 64, 8192)];
        let rule = LearningRateRule::for_roster(0.01, &roster);
        assert_eq!(rule.reference_batch, 1.0);
        let cpu = fixed_heterogeneous(&roster, 0, 1, 8192, &rule).unwrap();
        assert_eq!(cpu.batch_size, 48);
        assert_eq!(cpu.learning_rate, 0.01);
        let gpu = fixed_heterogeneous(&roster, 1, 1, 8192, &rule).unwrap();
        assert_eq!(gpu.batch_size, 8192);
        assert!((gpu.learning_rate - 0.01 * 8192.0).abs() < 1e-9);
        assert_eq!(
            fixed_heterogeneous(&roster, 7, 1, 8192, &rule),
            Err(PolicyError::UnknownWorker(7))
        );

        let config = PolicyConfig::FixedHeterogeneous {
            batch_per_thread: 1,
            replica_batch: 8192,
        };
        let mut s = Scheduler::new(config, roster, 0.01).unwrap();
        for u in [1.0, 50.0, 1e6] {
            assert_eq!(s.on_report(0, u).unwrap(), cpu);
            assert_eq!(s.on_report(1, u).unwrap(), gpu);
        }
    }

    #[test]
    fn shrink_when_below_min_u() {
        let mut s = AdaptiveState::single(8192, 64, 8192, 2.0, 50.0, 200.0).unwrap();
        let step = s.update(0, 10.0).unwrap();
        assert_eq!(step.batch, 4096);
        assert_eq!(s.min_u(), 10.0);
        assert_eq!(s.max_u(), 200.0);
    }

    #[test]
    fn grow_when_above_max_u() {
        let mut s = AdaptiveState::single(64, 64, 8192, 2.0, 50.0, 200.0).unwrap();
        let step = s.update(0, 300.0).unwrap();
        assert_eq!(step.batch, 128);
        assert_eq!(s.max_u(), 300.0);
        assert_eq!(s.min_u(), 50.0);
    }

    #[test]
    fn dead_band_leaves_everything() {
        let mut s = AdaptiveState::single(512, 64, 8192, 2.0, 50.0, 200.0).unwrap();
        for u in [50.0, 120.0, 200.0] {
            assert_eq!(s.update(0, u).unwrap().batch, 512);
            assert_eq!((s.min_u(), s.max_u()), (50.0, 200.0));
        }
    }

    #[test]
    fn shrink_clamps_at_min_batch() {
        let mut s = AdaptiveState::single(64, 64, 8192, 2.0, 50.0, 200.0).unwrap();
        let step = s.update(0, 10.0).unwrap();
        assert_eq!(step.unclamped_batch, 32);
        assert_eq!(step.batch, 64);
    }

    #[test]
    fn odd_batches_round_down() {
        let mut s = AdaptiveState::single(101, 1, 8192, 2.0, 50.0, 200.0).unwrap();
        assert_eq!(s.update(0, 10.0).unwrap().batch, 50);
        let mut s = AdaptiveState::single(3, 1, 8192, 1.5, 50.0, 200.0).unwrap();
        assert_eq!(s.update(0, 300.0).unwrap().batch, 4);
    }

    #[test]
    fn adaptive_update_rescales_learning_rate() {
        let profile = WorkerProfile::replica(0, 64, 8192);
        let mut rule = LearningRateRule {
            base_eta: 0.5,
            reference_batch: 64.0,
            max_eta: None,
        };
        let mut s = AdaptiveState::single(8192, 64, 8192, 2.0, 50.0, 200.0).unwrap();
        let d = adaptive_update(&mut s, &profile, 10.0, &rule).unwrap();
        assert_eq!(d.batch_size, 4096);
        assert!((d.learning_rate - 0.5 * 64.0).abs() < 1e-12);
        rule.max_eta = Some(4.0);
        assert_eq!(rule.rate(&profile, 4096), 4.0);
        assert_eq!(rule.rate(&profile, 64), 0.5);
    }

    #[test]
    fn learning_rate_cap_spares_uniform() {
        let roster = vec![WorkerProfile::sharded(0, 4, 4, 64), WorkerProfile::replica(1, 8, 512)];
        let fixed = PolicyConfig::FixedHeterogeneous {
            batch_per_thread: 1,
            replica_batch: 512,
        };
        let s = Scheduler::new(fixed, roster.clone(), 0.01).unwrap().with_max_learning_rate(1.0).unwrap();
        assert_eq!(s.current(0).unwrap().learning_rate, 0.01);
        assert_eq!(s.current(1).unwrap().learning_rate, 1.0);
        let u = Scheduler::new(PolicyConfig::Uniform { batch: 8 }, roster.clone(), 3.0)
            .unwrap()
            .with_max_learning_rate(1.0)
            .unwrap();
        assert_eq!(u.current(1).unwrap().learning_rate, 3.0);
        assert!(Scheduler::new(fixed, roster, 0.01).unwrap().with_max_learning_rate(0.0).is_err());
    }

    #[test]
    fn initial_sizes_follow_worker_class() {
        let roster = vec![WorkerProfile::sharded(0, 56, 56, 56 * 64), WorkerProfile::replica(1, 128, 8192)];
        assert_eq!(initial_sizes(&roster), vec![56, 8192]);
    }

    #[test]
    fn equal_thresholds_degenerate_to_fixed() {
        let roster = vec![WorkerProfile::sharded(0, 8, 8, 8), WorkerProfile::replica(1, 512, 512)];
        let mut adaptive = Scheduler::new(
            PolicyConfig::Adaptive {
                alpha: 2.0,
                mode: ThresholdMode::Literal,
            },
            roster.clone(),
            0.1,
        )
        .unwrap();
        let fixed = Scheduler::new(
            PolicyConfig::FixedHeterogeneous {
                batch_per_thread: 1,
                replica_batch: 512,
            },
            roster,
            0.1,
        )
        .unwrap();
        let mut u = [0.0, 0.0];
        for round in 0..200 {
            let w = round % 2;
            u[w] += if w == 0 { 8.0 } else { 1.0 };
            assert_eq!(adaptive.on_report(w, u[w]).unwrap(), fixed.current(w).unwrap());
        }
    }

    #[test]
    fn first_report_does_not_resize() {
        let roster = vec![WorkerProfile::sharded(0, 4, 4, 256), WorkerProfile::replica(1, 16, 1024)];
        let mut s = AdaptiveState::new(&roster, 2.0, ThresholdMode::Literal).unwrap();
        assert_eq!(s.update(0, 4.0).unwrap().batch, 4);
        assert_eq!(s.max_u(), 4.0);
        assert_eq!(s.update(1, 1.0).unwrap().batch, 1024);
        // second report from the leader grows it
        assert_eq!(s.update(0, 8.0).unwrap().batch, 8);
    }

    #[test]
    fn rejects_decreasing_reports_and_bad_config() {
        let roster = vec![WorkerProfile::replica(0, 16, 1024)];
        let mut s = AdaptiveState::new(&roster, 2.0, ThresholdMode::Literal).unwrap();
        s.update(0, 5.0).unwrap();
        assert!(matches!(s.update(0, 4.0), Err(PolicyError::NonMonotonic { .. })));
        assert!(matches!(s.update(3, 4.0), Err(PolicyError::UnknownWorker(3))));
        assert!(AdaptiveState::new(&roster, 1.0, ThresholdMode::Literal).is_err());
        let bad = vec![WorkerProfile::replica(0, 64, 16)];
        assert!(AdaptiveState::new(&bad, 2.0, ThresholdMode::Literal).is_err());
        assert!(Scheduler::new(PolicyConfig::Uniform { batch: 4 }, vec![WorkerProfile::replica(3, 1, 2)], 0.1).is_err());
        assert!(Scheduler::new(PolicyConfig::Uniform { batch: 4 }, roster, 0.0).is_err());
    }

    #[test]
    fn strict_mode_compares_against_other_workers() {
        let roster = vec![WorkerProfile::sharded(0, 4, 4, 256), WorkerProfile::replica(1, 16, 1024)];
        let mut s = AdaptiveState::new(&roster, 2.0, ThresholdMode::StrictRecompute).unwrap();
        s.update(0, 4.0).unwrap();
        s.update(1, 1.0).unwrap();
        // worker 1 is behind worker 0 -> shrinks
        assert_eq!(s.update(1, 2.0).unwrap().batch, 512);
        // worker 0 is ahead -> grows
        assert_eq!(s.update(0, 8.0).unwrap().batch, 8);
        assert_eq!((s.min_u(), s.max_u()), (2.0, 2.0));
    }

    /// Two workers whose batches take `overhead + b * per_example` time
    /// units. Returns (update-rate ratio at the initial sizes, cumulative
    /// update ratio after `rounds`, fast worker batch, fast worker max).
    fn closed_loop(mode: ThresholdMode, rounds: usize) -> (f64, f64, usize, usize) {
        let threads = 8;
        let roster = vec![
            WorkerProfile::sharded(0, threads, threads, threads * 64),
            WorkerProfile::replica(1, 64, 8192),
        ];
        let per_example = [1.0, 0.01];
        let overhead = 1.0;
        let mut state = AdaptiveState::new(&roster, 2.0, mode).unwrap();
        let updates_per_batch = |w: usize, b: usize| match roster[w].class {
            WorkerClass::Sharded { threads } => threads.min(b) as f64,
            WorkerClass::Replica => 1.0,
        };
        let batch_time = |w: usize, b: usize| overhead + b as f64 * per_example[w];
        let rate = |w: usize, b: usize| updates_per_batch(w, b) / batch_time(w, b);
        let initial = initial_sizes(&roster);
        let warmup = rate(0, initial[0]) / rate(1, initial[1]);

        let mut u = [0.0f64; 2];
        let mut finish = [batch_time(0, initial[0]), batch_time(1, initial[1])];
        for _ in 0..rounds {
            let w = if finish[0] <= finish[1] { 0 } else { 1 };
            u[w] += updates_per_batch(w, state.batch(w).unwrap());
            let next = state.update(w, u[w]).unwrap().batch;
            finish[w] += batch_time(w, next);
        }
        let ratio = u[0].max(u[1]) / u[0].min(u[1]).max(1.0);
        (warmup, ratio, state.batch(1).unwrap(), roster[1].max_batch)
    }

    #[test]
    fn closed_loop_balancing() {
        for mode in [ThresholdMode::Literal, ThresholdMode::StrictRecompute] {
            let (warmup, ratio, fast_batch, fast_max) = closed_loop(mode, 500);
            assert!(warmup > 50.0, "{mode:?}: warmup ratio {warmup}");
            assert!(ratio <= 3.0 || fast_batch == fast_max, "{mode:?}: ratio {ratio}");
        }
        let (_, ratio, _, _) = closed_loop(ThresholdMode::StrictRecompute, 500);
        assert!(ratio <= 3.0, "strict ratio {ratio}");
    }

    #[derive(Debug, Clone)]
    struct Report {
        worker: usize,
        increment: f64,
    }

    fn report_sequence() -> impl Strategy<Value = (Vec<(usize, usize, usize)>, f64, bool, Vec<Report>)> {
        let profiles = proptest::collection::vec((1usize..4, 1usize..64, 0usize..200), 1..5);
        (profiles, 1.1f64..4.0, any::<bool>()).prop_flat_map(|(profiles, alpha, strict)| {
            let n = profiles.len();
            let reports = proptest::collection::vec(
                (0..n, 0.0f64..50.0).prop_map(|(worker, increment)| Report { worker, increment }),
                10_000,
            );
            (Just(profiles), Just(alpha), Just(strict), reports)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn adaptive_invariants_hold_for_random_reports(
            (profiles, alpha, strict, reports) in report_sequence()
        ) {
            let roster: Vec<WorkerProfile> = profiles
                .iter()
                .enumerate()
                .map(|(id, &(kind, lo, span))| {
                    if kind == 1 {
                        WorkerProfile::replica(id, lo, lo + span)
                    } else {
                        WorkerProfile::sharded(id, kind, lo, lo + span)
                    }
                })
                .collect();
            let mode = if strict { ThresholdMode::StrictRecompute } else { ThresholdMode::Literal };
            let mut state = AdaptiveState::new(&roster, alpha, mode).unwrap();
            let mut u = vec![0.0; roster.len()];
            for r in reports {
                let (old_min, old_max) = (state.min_u(), state.max_u());
                u[r.worker] += r.increment;
                let step = state.update(r.worker, u[r.worker]).unwrap();
                let p = &roster[r.worker];
                prop_assert!(step.batch >= p.min_batch && step.batch <= p.max_batch);
                let b = step.previous_batch;
                let grown = (b as f64 * alpha).floor() as usize;
                let shrunk = (b as f64 / alpha).floor() as usize;
                prop_assert!(
                    step.unclamped_batch == b || step.unclamped_batch == grown || step.unclamped_batch == shrunk
                );
                prop_assert!(state.min_u() <= state.max_u());
                if mode == ThresholdMode::Literal {
                    prop_assert!(state.min_u() <= old_min || state.min_u() == u[r.worker]);
                    prop_assert!(state.max_u() >= old_max || state.max_u() == u[r.worker]);
                    prop_assert!(state.min_u() == old_min || state.min_u() == u[r.worker]);
                    prop_assert!(state.max_u() == old_max || state.max_u() == u[r.worker]);
                }
            }
        }
    }
}
