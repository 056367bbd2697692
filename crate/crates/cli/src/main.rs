use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use tdmcl::runner::{load_or_generate_suite, write_report, Checkpoint, MetricsLedger, PhaseRecord, RunConfig, CHECKPOINT_FILE, EFFECTIVE_CONFIG_FILE, LEDGER_FILE};
use tdmcl::tasks::{generate_suite, write_suite};
use tdmcl::{Error, Result, Runner32};

#[derive(Parser)]
#[command(name = "tdmcl", version, about = "Spiking continual learning with column growth, evolved wiring and feedback pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the nine-task suite into a directory.
    GenSuite {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// `key=value` overrides applied after the config file.
        overrides: Vec<String>,
    },
    /// Run the full protocol; artifacts land in the output directory.
    Run {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Stop (checkpointed) after this many phases; `resume` continues.
        #[arg(long)]
        stop_after: Option<usize>,
        overrides: Vec<String>,
    },
    /// Continue an interrupted run from its checkpoint.
    Resume {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate learned tasks of a checkpoint on their test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<usize>,
    },
    /// Fine-tune one learned task of a run directory.
    FineTune {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        task: usize,
        /// Defaults to `train.finetune_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rewrite the CSV reports of a run directory from its ledger.
    Report {
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn drive(mut runner: Runner32, stop_after: Option<usize>) -> Result<()> {
    let total = runner.protocol().len();
    let started = Instant::now();
    let mut echo = |r: &PhaseRecord| println!("{}", format_record(r, total, started));
    match stop_after {
        Some(n) if n < total => runner.run_until(n, &mut echo),
        _ => runner.run(&mut echo).map(|_| ()),
    }
}

fn format_record(rec: &PhaseRecord, total: usize, started: Instant) -> String {
    format!(
        "[{:>2}/{total}] {:<9} task {}  avg_metric {:.4}  active_local {}  long_range {} (sparsity {:.2})  {:.1}s",
        rec.index + 1,
        rec.phase.to_string(),
        rec.task,
        rec.average(),
        rec.census.active_local,
        rec.census.long_range_edges,
        rec.long_range_sparsity,
        started.elapsed().as_secs_f64()
    )
}

/// Config of a run directory: from its checkpoint, else its config echo.
fn run_config(dir: &Path) -> Result<RunConfig> {
    let ck = dir.join(CHECKPOINT_FILE);
    if ck.exists() {
        return Ok(Checkpoint::<f32>::load(&ck)?.config);
    }
    let echo = dir.join(EFFECTIVE_CONFIG_FILE);
    if echo.exists() {
        return RunConfig::load(Some(&echo), &[]);
    }
    Err(Error::Missing(format!("{} holds no run", dir.display())))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSuite { seed, out, config, overrides } => {
            let mut cfg = RunConfig::load(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.suite.seed = s;
            }
            let suite = generate_suite(&cfg.suite)?;
            write_suite(&out, &suite)?;
            println!("wrote {} tasks to {}", suite.len(), out.display());
        }
        Command::Run { config, out, stop_after, overrides } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let suite = load_or_generate_suite(Some(&out), &cfg.suite)?;
            drive(Runner32::new(cfg, suite)?.with_output(&out)?, stop_after)?;
        }
        Command::Resume { out } => {
            let runner = Runner32::resume(&out)?;
            println!("resuming at phase {} of {}", runner.progress() + 1, runner.protocol().len());
            drive(runner, None)?;
        }
        Command::Eval { checkpoint, task } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let dir = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let suite = load_or_generate_suite(Some(dir), &ck.config.suite)?;
            let mut runner = Runner32::from_checkpoint(ck, suite)?;
            let learned = runner.learned_tasks();
            match task {
                Some(t) if t == 0 || t > learned => {
                    return Err(Error::InvalidConfig(format!("task {t} is not learned in this checkpoint ({learned} tasks)")));
                }
                Some(t) => println!("task {t}: {:.6}", runner.evaluate(t)?),
                None => {
                    let metrics = runner.evaluate_all(learned)?;
                    for (t, m) in &metrics {
                        println!("task {t}: {m:.6}");
                    }
                    let avg = metrics.values().sum::<f64>() / metrics.len().max(1) as f64;
                    println!("average: {avg:.6}");
                }
            }
        }
        Command::FineTune { out, task, epochs } => {
            let mut runner = Runner32::resume(&out)?;
            let epochs = epochs.unwrap_or(runner.config.train.finetune_epochs);
            let r = runner.fine_tune(task, epochs)?;
            runner.finish()?;
            println!("task {}: {:.6} -> {:.6} after {} epochs", r.task, r.before, r.after, r.epochs);
        }
        Command::Report { out } => {
            let ledger = MetricsLedger::load(&out.join(LEDGER_FILE))?;
            let cfg = run_config(&out)?;
            write_report(&ledger, cfg.evolution.norm_scope, &out)?;
            println!("wrote reports for {} phases to {}", ledger.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("TDMCL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
