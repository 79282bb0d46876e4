//! Derived quantities computed from finished runs.

use hetsgd::engine::RunMetrics;

use crate::HarnessError;

/// Busy time over training time per worker, clamped to [0, 1]. Busy time
/// includes emulated slowdown, so a throttled worker counts as occupied.
pub fn utilization_proxy(metrics: &RunMetrics) -> Vec<f64> {
    metrics
        .workers
        .iter()
        .map(|w| {
            if metrics.wall_ms > 0.0 {
                (w.busy_ms / metrics.wall_ms).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Each worker's share of all reported model updates.
pub fn update_ratio(metrics: &RunMetrics) -> Result<Vec<f64>, HarnessError> {
    shares(&metrics.update_counts())
}

/// `values` normalised to sum to one.
pub fn shares(values: &[f64]) -> Result<Vec<f64>, HarnessError> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(HarnessError::NoUpdates);
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// Smallest loss sample across runs, ignoring non-finite values.
pub fn min_loss<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Option<f64> {
    runs.into_iter()
        .flat_map(|m| m.samples.iter().map(|s| s.loss))
        .filter(|l| l.is_finite())
        .min_by(f64::total_cmp)
}

/// Per-epoch statistical efficiency: the loss drop from the first sample to
/// the first sample taken at or after `epochs` full epochs, divided by the
/// epochs elapsed.
pub fn loss_decrease_per_epoch(metrics: &RunMetrics, epochs: f64) -> Option<f64> {
    let first = metrics.samples.first()?;
    let at = metrics.samples.iter().find(|s| s.epoch >= epochs - 1e-9)?;
    if at.epoch <= first.epoch {
        return None;
    }
    Some((first.loss - at.loss) / (at.epoch - first.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetsgd::engine::{LossSample, WorkerMetrics};

    fn metrics(updates: &[f64], busy: &[f64], wall: f64) -> RunMetrics {
        RunMetrics {
            workers: updates
                .iter()
                .zip(busy)
                .map(|(&u, &b)| WorkerMetrics {
                    update_count: u,
                    busy_ms: b,
                    ..WorkerMetrics::default()
                })
                .collect(),
            wall_ms: wall,
            ..RunMetrics::default()
        }
    }

    #[test]
    fn utilization_bounds() {
        let m = metrics(&[1.0, 0.0, 3.0], &[50.0, 0.0, 120.0], 100.0);
        assert_eq!(utilization_proxy(&m), vec![0.5, 0.0, 1.0]);
        assert_eq!(utilization_proxy(&metrics(&[0.0], &[0.0], 0.0)), vec![0.0]);
    }

    #[test]
    fn ratios_sum_to_one() {
        let m = metrics(&[3.0, 1.0], &[0.0, 0.0], 1.0);
        assert_eq!(update_ratio(&m).unwrap(), vec![0.75, 0.25]);
        assert_eq!(update_ratio(&metrics(&[7.0], &[0.0], 1.0)).unwrap(), vec![1.0]);
        let r = update_ratio(&metrics(&[0.1, 0.2, 0.3, 1e-9], &[0.0; 4], 1.0)).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(matches!(update_ratio(&metrics(&[0.0, 0.0], &[0.0; 2], 1.0)), Err(HarnessError::NoUpdates)));
    }

    #[test]
    fn per_epoch_decrease() {
        let mut m = RunMetrics::default();
        for (e, l) in [(0.0, 1.0), (1.0, 0.6), (2.0, 0.5)] {
            m.samples.push(LossSample {
                wall_ms: e * 10.0,
                epoch: e,
                loss: l,
            });
        }
        assert_eq!(loss_decrease_per_epoch(&m, 2.0), Some(0.25));
        assert_eq!(loss_decrease_per_epoch(&m, 3.0), None);
        assert_eq!(min_loss([&m]), Some(0.5));
    }
}
