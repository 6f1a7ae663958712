use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pinnev_core::workflow::config::{RunConfig, Task};
use pinnev_core::workflow::{gradcheck, predict, run, RunOptions};

/// Partially-interpretable extreme-value regression.
#[derive(Parser)]
#[command(name = "pinnev", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of concurrent sub-fits.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitTask {
    Occurrence,
    Threshold,
    BgevPp,
}

impl From<FitTask> for Task {
    fn from(t: FitTask) -> Self {
        match t {
            FitTask::Occurrence => Task::Occurrence,
            FitTask::Threshold => Task::Threshold,
            FitTask::BgevPp => Task::BgevPp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset.
    Simulate(Common),
    /// Fit an occurrence, threshold or point-process model.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Model to fit; defaults to the task named in the configuration.
        #[arg(long, value_enum)]
        task: Option<FitTask>,
    },
    /// Evaluate a saved model on the configured dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path without extension.
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a forecast table.
    Score(Common),
    /// Bootstrap the point-process fit.
    Bootstrap(Common),
    /// Compare thresholds, forms or architectures.
    Sweep(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        cells: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn load(c: &Common) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn execute(mut cfg: RunConfig, task: Task, c: &Common) -> anyhow::Result<()> {
    cfg.task = task;
    let summary = run(&cfg, &RunOptions { out: c.out.clone(), workers: c.workers })?;
    println!("{}", serde_json::to_string_pretty(&summary.report)?);
    Ok(())
}

fn write_report(dir: &Path, name: &str, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(dir.join(name), &text)?;
    print!("{text}");
    Ok(())
}

fn main_inner(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Simulate(c) => execute(load(&c)?, Task::Simulate, &c)?,
        Command::Score(c) => execute(load(&c)?, Task::Score, &c)?,
        Command::Bootstrap(c) => execute(load(&c)?, Task::Bootstrap, &c)?,
        Command::Sweep(c) => execute(load(&c)?, Task::Sweep, &c)?,
        Command::Fit { common, task } => {
            let cfg = load(&common)?;
            let task = task.map(Task::from).unwrap_or(cfg.task);
            if !matches!(task, Task::Occurrence | Task::Threshold | Task::BgevPp) {
                bail!("`fit` runs occurrence, threshold or bgev_pp models, not {task:?}");
            }
            execute(cfg, task, &common)?;
        }
        Command::Predict { common, model } => {
            let cfg = load(&common)?;
            let hashes = predict(&cfg, &model, &common.out)?;
            for (name, hash) in hashes {
                println!("{hash}  {name}");
            }
        }
        Command::Gradcheck { common, cells, step, tol } => {
            let cfg = load(&common)?;
            let report = gradcheck(&cfg, cells, step, tol)?;
            let summary = serde_json::json!({
                "passed": report.passed(),
                "checked": report.entries.len(),
                "max_rel_error": report.max_rel_error(),
                "step": step,
                "tol": tol,
            });
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
            write_report(&common.out, "report.json", &summary)?;
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
