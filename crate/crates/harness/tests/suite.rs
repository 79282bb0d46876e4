use std::path::Path;

use hetsgd::engine::WorkerConfig;
use hetsgd_harness::analysis::utilization_proxy;
use hetsgd_harness::config::{DataSource, KeyValues};
use hetsgd_harness::report::{LOSS_HEADER, SUMMARY_HEADER};
use hetsgd_harness::{run_experiment, run_experiment_suite, update_ratio, HarnessError, RunConfig};

fn config(extra: &str) -> RunConfig {
    let text = format!(
        "
        seed = 5
        data.synthetic.n = 600
        data.synthetic.dim = 5
        data.synthetic.classes = 3
        model.layers = 5-10-3
        policy = uniform
        policy.batch = 20
        train.eta = 0.2
        train.epochs = 2
        worker.0.mode = batch_replica
        {extra}
        "
    );
    RunConfig::from_key_values(&KeyValues::parse(&text).unwrap()).unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn same_seed_means_same_initial_loss_across_policies() {
    let dir = tempfile::tempdir().unwrap();
    let a = config("name = hogbatch");
    let b = config(
        "name = adaptive
         policy = adaptive
         worker.0.mode = hogwild_sharded
         worker.0.threads = 2
         worker.0.min_batch = 2
         worker.0.max_batch = 64
         worker.1.mode = batch_replica
         worker.1.min_batch = 8
         worker.1.max_batch = 128",
    );
    let report = run_experiment_suite(&[a, b], dir.path()).unwrap();
    let first: Vec<f64> = report
        .runs
        .iter()
        .map(|r| r.result.as_ref().unwrap().initial_loss().unwrap())
        .collect();
    assert!((first[0] - first[1]).abs() <= 1e-9);
    assert!(report.basis.unwrap() > 0.0);
}

#[test]
fn single_run_is_normalised_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment_suite(&[config("name = solo")], dir.path()).unwrap();
    let text = read(&dir.path().join("solo_loss.csv"));
    let norm: Vec<f64> = column(&text, "loss_normalized").iter().map(|s| s.parse().unwrap()).collect();
    let min = norm.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(min, 1.0);
    assert!(norm.iter().all(|&v| v >= 1.0));
    let summary = read(&report.summary);
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER.join(","));
    assert_eq!(column(&summary, "min_normalized"), vec!["1"]);
}

#[test]
fn empty_suite_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_experiment_suite(&[], dir.path()), Err(HarnessError::EmptySuite)));
}

#[test]
fn failures_are_recorded_and_the_suite_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut broken = config("name = broken");
    broken.data.source = DataSource::Libsvm {
        path: dir.path().join("missing.libsvm"),
        features: 5,
        labels: Default::default(),
    };
    let report = run_experiment_suite(&[broken, config("name = fine")], dir.path()).unwrap();
    assert!(report.runs[0].result.is_err());
    assert!(report.runs[1].result.is_ok());
    let summary = read(&report.summary);
    assert_eq!(column(&summary, "status"), vec!["failed", "ok"]);
    assert!(column(&summary, "error")[0].contains("missing.libsvm"));
    assert!(dir.path().join("fine_loss.csv").exists());
}

#[test]
fn duplicate_names_get_distinct_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment_suite(&[config("name = x"), config("name = x")], dir.path()).unwrap();
    assert_eq!(report.runs[0].name, "x");
    assert_eq!(report.runs[1].name, "x_1");
}

#[test]
fn loss_csv_is_reproducible_in_deterministic_mode() {
    let run = |dir: &Path| {
        run_experiment_suite(&[config("name = det\ntrain.epochs = 3")], dir).unwrap();
        read(&dir.join("det_loss.csv"))
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (run(d1.path()), run(d2.path()));
    assert_eq!(a.lines().next().unwrap(), LOSS_HEADER.join(","));
    assert_eq!(column(&a, "epoch"), column(&b, "epoch"));
    assert_eq!(column(&a, "loss"), column(&b, "loss"));
    assert_eq!(column(&a, "loss").len(), 4);
    let times: Vec<f64> = column(&a, "wall_ms").iter().map(|s| s.parse().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn saturated_single_worker_is_mostly_busy() {
    let mut c = config("train.epochs = 4\ndata.synthetic.n = 6000\nmodel.layers = 5-64-64-3\npolicy.batch = 200");
    c.workers = vec![WorkerConfig::replica(1, 1, 10_000)];
    let m = run_experiment(&c).unwrap();
    let u = utilization_proxy(&m);
    assert!(u[0] >= 0.9 && u[0] <= 1.0, "{u:?}");
    assert_eq!(update_ratio(&m).unwrap(), vec![1.0]);
}

#[test]
fn idle_worker_has_zero_utilization() {
    // the second worker never fits a batch in strict end-of-epoch mode
    let mut c = config("train.end_of_epoch = strict\npolicy.batch = 600");
    c.workers = vec![WorkerConfig::replica(1, 1, 1000), WorkerConfig::replica(1, 1, 1000)];
    let m = run_experiment(&c).unwrap();
    let u = utilization_proxy(&m);
    let idle = m.workers.iter().position(|w| w.batches == 0).unwrap();
    assert_eq!(u[idle], 0.0);
    assert_eq!(update_ratio(&m).unwrap()[idle], 0.0);
}
