use std::path::Path;
use std::process::{Command, Output};

fn hetsgd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetsgd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

const CONF: &str = "
name = tiny
seed = 2
data.source = libsvm
data.path = data.libsvm
data.features = 4
model.layers = 4-6-2
policy = fixed
policy.batch_per_thread = 2
policy.replica_batch = 32
train.eta = 0.1
train.epochs = 2
worker.0.mode = hogwild_sharded
worker.0.threads = 2
worker.0.max_batch = 64
worker.1.mode = batch_replica
worker.1.max_batch = 64
";

#[test]
fn gen_data_then_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = hetsgd(
        &["gen-data", "--synthetic", "--n", "300", "--dim", "4", "--seed", "1", "--out", "data.libsvm"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("data.libsvm")).unwrap().lines().count(), 300);

    std::fs::write(dir.path().join("tiny.conf"), CONF).unwrap();
    let out = hetsgd(&["train", "--config", "tiny.conf", "--out", "res", "--train.epochs=3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loss = std::fs::read_to_string(dir.path().join("res/tiny_loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "wall_ms,epoch,loss,loss_normalized");
    assert_eq!(loss.lines().count(), 1 + 4);
    let trace = std::fs::read_to_string(dir.path().join("res/tiny_batch_sizes.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "wall_ms,worker,batch_size");
    assert!(dir.path().join("res/tiny_workers.csv").exists());
}

#[test]
fn suite_over_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    hetsgd(
        &["gen-data", "--synthetic", "--n", "200", "--dim", "4", "--seed", "1", "--out", "data.libsvm"],
        dir.path(),
    );
    std::fs::create_dir(dir.path().join("confs")).unwrap();
    let data = dir.path().join("data.libsvm");
    let conf = CONF.replace("data.path = data.libsvm", &format!("data.path = {}", data.display()));
    std::fs::write(dir.path().join("confs/a.conf"), conf.replace("name = tiny", "name = a")).unwrap();
    std::fs::write(
        dir.path().join("confs/b.conf"),
        conf.replace("name = tiny", "name = b").replace("policy = fixed", "policy = adaptive"),
    )
    .unwrap();
    let out = hetsgd(&["suite", "--configs", "confs", "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("res/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hetsgd(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(hetsgd(&["train"], dir.path()).status.code(), Some(1));
    assert_eq!(hetsgd(&["--help"], dir.path()).status.code(), Some(0));
    // missing config file and bad override are usage errors
    assert_eq!(hetsgd(&["train", "--config", "nope.conf"], dir.path()).status.code(), Some(1));
    std::fs::write(dir.path().join("tiny.conf"), CONF).unwrap();
    assert_eq!(hetsgd(&["train", "--config", "tiny.conf", "--oops"], dir.path()).status.code(), Some(1));
    // data file missing: the run itself fails
    let out = hetsgd(&["train", "--config", "tiny.conf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.libsvm"));
}
