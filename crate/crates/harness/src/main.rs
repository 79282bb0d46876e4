use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hetsgd::dataset::{synthetic_blobs, write_libsvm};
use hetsgd_harness::analysis::{min_loss, update_ratio, utilization_proxy};
use hetsgd_harness::report::write_run_files;
use hetsgd_harness::suite::config_files;
use hetsgd_harness::{run_experiment, run_experiment_suite, ConfigError, HarnessError, RunConfig};

/// Heterogeneous asynchronous SGD experiments.
#[derive(Parser)]
#[command(name = "hetsgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its CSV series.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `--key=value` settings applied on top of the file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every `*.conf` in a directory and normalise losses across them.
    Suite {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Write a synthetic dataset in LIBSVM format.
    GenData {
        #[arg(long, required = true)]
        synthetic: bool,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::EmptySuite => Failure::Usage(e.into()),
            other => Failure::Run(other.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

fn train(config: PathBuf, out: Option<PathBuf>, overrides: Vec<String>) -> Result<(), Failure> {
    let cfg = RunConfig::load(&config, &overrides)?;
    let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let metrics = run_experiment(&cfg)?;
    let basis = min_loss([&metrics]).unwrap_or(1.0);
    let files = write_run_files(&out, &cfg.name, &metrics, basis)?;
    println!(
        "{}: loss {:.6} -> {:.6} in {:.0} ms over {} epochs",
        cfg.name,
        metrics.initial_loss().unwrap_or(f64::NAN),
        metrics.final_loss().unwrap_or(f64::NAN),
        metrics.wall_ms,
        metrics.epochs_completed
    );
    if let Ok(shares) = update_ratio(&metrics) {
        let util = utilization_proxy(&metrics);
        for (i, (s, u)) in shares.iter().zip(util).enumerate() {
            println!("  worker {i}: update share {s:.3}, utilization {u:.3}");
        }
    }
    for f in files {
        println!("  wrote {}", f.display());
    }
    Ok(())
}

fn suite(configs: PathBuf, out: PathBuf) -> Result<(), Failure> {
    let paths = config_files(&configs)?;
    let cfgs = paths
        .iter()
        .map(|p| RunConfig::load::<&str>(p, &[]))
        .collect::<Result<Vec<_>, _>>()?;
    let report = run_experiment_suite(&cfgs, &out)?;
    let failed = report.runs.iter().filter(|r| r.result.is_err()).count();
    println!(
        "{} runs, {} failed, loss basis {}; summary in {}",
        report.runs.len(),
        failed,
        report.basis.map_or("n/a".to_string(), |b| format!("{b:.6}")),
        report.summary.display()
    );
    if failed > 0 {
        return Err(Failure::Run(anyhow::anyhow!("{failed} of {} runs failed", report.runs.len())));
    }
    Ok(())
}

fn gen_data(n: usize, dim: usize, classes: usize, separation: f64, seed: u64, out: PathBuf) -> Result<(), Failure> {
    let ds = synthetic_blobs(n, dim, classes, separation, seed).map_err(|e| Failure::Usage(e.into()))?;
    let run = || -> anyhow::Result<()> {
        let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
        write_libsvm(&ds, BufWriter::new(file)).with_context(|| format!("writing {}", out.display()))?;
        Ok(())
    };
    run().map_err(Failure::Run)?;
    println!("wrote {n} rows to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HETSGD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, out, overrides } => train(config, out, overrides),
        Command::Suite { configs, out } => suite(configs, out),
        Command::GenData {
            synthetic: _,
            n,
            dim,
            classes,
            separation,
            seed,
            out,
        } => gen_data(n, dim, classes, separation, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
