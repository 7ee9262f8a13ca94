//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 2 on configuration/ingestion problems, 3 on
//! numeric aborts (non-finite losses, failed solves, failed selftest).

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use pdetime_core::error::Error;
use pdetime_core::experiment::{self, CommandKind, ExperimentSpec};

#[derive(Parser)]
#[command(
    name = "pdetime",
    about = "Long-horizon forecasting experiments: train, evaluate, ablate, baseline, selftest"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (flat key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for metrics.csv, logs, and checkpoints.
    #[arg(long, default_value = "runs/latest", global = true)]
    out: PathBuf,

    /// Config override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Root random seed (overrides the config value).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset path or "synthetic:sinusoid" (overrides the config value).
    #[arg(long, global = true)]
    dataset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report test metrics.
    Train,
    /// Evaluate a saved checkpoint on the test split.
    Evaluate,
    /// Train and evaluate all six ablation variants.
    Ablate,
    /// Persistence and linear-ridge baselines.
    Baseline,
    /// Run the built-in oracle suites (solver, ridge, gradients).
    Selftest,
}

/// Logger that tees to stderr and, once the run directory exists, log.txt.
struct TeeLogger {
    file: Mutex<Option<File>>,
}

static LOGGER: TeeLogger = TeeLogger {
    file: Mutex::new(None),
};

impl log::Log for TeeLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{}] {}", record.level(), record.args());
        eprintln!("{line}");
        if let Ok(mut guard) = self.file.lock() {
            if let Some(f) = guard.as_mut() {
                let _ = writeln!(f, "{line}");
            }
        }
    }

    fn flush(&self) {}
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("--set expects key=value, got '{s}'"))
        })
        .collect()
}

fn main() {
    let cli = Cli::parse();
    let overrides = match parse_overrides(&cli.overrides) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    };
    let command = match cli.command {
        Command::Train => CommandKind::Train,
        Command::Evaluate => CommandKind::Evaluate,
        Command::Ablate => CommandKind::Ablate,
        Command::Baseline => CommandKind::Baseline,
        Command::Selftest => CommandKind::Selftest,
    };
    let spec = ExperimentSpec {
        command,
        config_path: cli.config,
        out_dir: cli.out.clone(),
        overrides,
        seed: cli.seed,
        dataset: cli.dataset,
    };

    log::set_logger(&LOGGER).expect("logger already set");
    log::set_max_level(log::LevelFilter::Info);

    // Validate the configuration before creating any output files, so a bad
    // config leaves no partial run directory behind.
    if let Err(err) = experiment::preflight(&spec) {
        eprintln!("error: {err}");
        std::process::exit(exit_code_for(&err));
    }
    if std::fs::create_dir_all(&cli.out).is_ok() {
        if let Ok(f) = File::create(cli.out.join("log.txt")) {
            *LOGGER.file.lock().unwrap() = Some(f);
        }
    }

    match experiment::run(&spec) {
        Ok(table) => {
            for row in &table.rows {
                log::info!(
                    "{} H={} {}: mse {} mae {}",
                    row.dataset,
                    row.horizon,
                    row.variant,
                    row.mse,
                    row.mae
                );
            }
            log::info!("wrote {}", cli.out.join("metrics.csv").display());
        }
        Err(err) => {
            log::info!("aborted: {err}");
            eprintln!("error: {err}");
            std::process::exit(exit_code_for(&err));
        }
    }
}
