//! Command-line entry points.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, GameKind};
use super::gradcheck;
use super::metrics::{to_csv, to_csv_rows, MetricRow, CSV_HEADER};
use super::parallel::Runner;
use crate::meta::{meta_test, meta_train, Experiment};
use crate::zero_sum_analytic::{run_fig3, Fig3Config};

pub const SEED_ENV: &str = "METAMARL_SEED";

#[derive(Parser, Debug)]
#[command(name = "metamarl", version, about = "Meta-learning against learning peers in repeated matrix games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Meta-train every seed in the config.
    Train {
        /// Config file or preset name.
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Meta-test a checkpoint on the test split and append the rows.
    Test {
        config: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Zero-sum adaptation curves for both meta-gradients.
    Fig3 {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check gradients against exact oracles.
    Gradcheck {
        #[arg(long, default_value = "all")]
        game: String,
    },
    /// Print the peer population described by a config.
    DumpPopulation { config: String },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Gradcheck(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Gradcheck(m) => write!(f, "gradcheck failed: {m}"),
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Loads a config and applies the master-seed environment override.
pub fn load_config(name_or_path: &str, workers: Option<usize>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(name_or_path).map_err(|e| CliError::Config(e.to_string()))?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.master_seed = s.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not a u64")))?;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn manifest_json(cfg: &ExperimentConfig, status: &str) -> String {
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v))).collect();
    let m = serde_json::json!({
        "config": config,
        "config_hash": cfg.hash(),
        "master_seed": cfg.master_seed,
        "version": env!("CARGO_PKG_VERSION"),
        "git": git_revision(),
        "status": status,
    });
    serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n"
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("checkpoint_seed{seed}.txt")
}

fn train(config: &str, out: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let cfg = load_config(config, workers)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    if cfg.game == GameKind::ZeroSum {
        let f = Fig3Config {
            n_samples: cfg.samples,
            alpha: cfg.inner_lr,
            beta: cfg.outer_lr,
            iters: cfg.max_iters,
            seed: cfg.master_seed,
            ..Default::default()
        };
        write(&out.join("fig3.csv"), &run_fig3(&f).to_csv())?;
        return write(&out.join("manifest.json"), &manifest_json(&cfg, "ok"));
    }
    let exp = Experiment::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let runner = Runner::new(cfg.workers).map_err(rt)?;
    let mut rows: Vec<MetricRow> = Vec::new();
    for &seed in &cfg.seeds {
        match meta_train(&exp, seed, &runner) {
            Ok((params, r)) => {
                rows.extend(r);
                let ck = Checkpoint { params, config_hash: cfg.hash(), master_seed: cfg.master_seed, seed };
                write(&out.join(checkpoint_name(seed)), &ck.to_text())?;
            }
            Err(e) => {
                // keep what finished, marked as failed
                write(&out.join("metrics.csv"), &to_csv(&rows))?;
                write(&out.join("manifest.json"), &manifest_json(&cfg, &format!("failed at seed {seed}: {e}")))?;
                return Err(rt(e));
            }
        }
    }
    write(&out.join("metrics.csv"), &to_csv(&rows))?;
    write(&out.join("manifest.json"), &manifest_json(&cfg, "ok"))
}

fn test(config: &str, checkpoint: &Path, out: Option<&Path>, workers: Option<usize>) -> Result<(), CliError> {
    let cfg = load_config(config, workers)?;
    let text = std::fs::read_to_string(checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", checkpoint.display())))?;
    let ck = Checkpoint::load(&text, &cfg.hash()).map_err(rt)?;
    let exp = Experiment::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let runner = Runner::new(cfg.workers).map_err(rt)?;
    let rows = meta_test(&exp, &ck.params, ck.seed, &runner).map_err(rt)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    let path = dir.join("metrics.csv");
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&to_csv_rows(&rows));
    f.write_all(text.as_bytes()).map_err(rt)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, workers } => train(&config, &out, workers),
        Command::Test { config, checkpoint, out, workers } => test(&config, &checkpoint, out.as_deref(), workers),
        Command::Fig3 { out, samples, iters, seed } => {
            std::fs::create_dir_all(&out).map_err(rt)?;
            let f = Fig3Config { n_samples: samples, iters, seed, ..Default::default() };
            write(&out.join("fig3.csv"), &run_fig3(&f).to_csv())
        }
        Command::Gradcheck { game } => {
            let results = gradcheck::run_suite(&game).map_err(CliError::Config)?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                if !r.passed {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Gradcheck(failed.join("; ")))
            }
        }
        Command::DumpPopulation { config } => {
            let cfg = load_config(&config, None)?;
            let game = cfg.build_game().map_err(CliError::Config)?;
            let pop = cfg.build_population(&game).map_err(CliError::Config)?;
            print!("{}", pop.dump());
            Ok(())
        }
    }
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metamarl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
