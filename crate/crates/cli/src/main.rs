//! `agentopt`: train, diagnose, attack and compare sparse-training runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentopt::adversarial::{robust_accuracy, AttackConfig};
use agentopt::checkpoint::Checkpoint;
use agentopt::diagnostics::{DiagnosticReport, Measure, DEFAULT_PERTURBATION_STD, DEFAULT_REPLICATES};
use agentopt::harness::{compare, load_run, train_to_dir, Experiment, ExperimentConfig, Metric, TrainOptions};
use agentopt::{nn, RngStream};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "agentopt", version, about = "Sparse and adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Variance,
    Correlation,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, summary.json and checkpoint.bin into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/checkpoint.bin when present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs (the run can be resumed later).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Gradient variance or correlation under Gaussian weight perturbation,
    /// one row per checkpoint and replicate.
    Diagnose {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "variance")]
        measure: MeasureArg,
        #[arg(long, default_value_t = DEFAULT_PERTURBATION_STD)]
        std: f64,
        #[arg(long, default_value_t = DEFAULT_REPLICATES)]
        replicates: usize,
        /// Minibatch size for the variance measure (default: the run's batch size).
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-replicate rows as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean and PGD robust test accuracy of a checkpoint.
    AttackEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        /// Step size (default eps/4).
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        no_random_start: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare runs at epoch budgets and by epochs needed to reach thresholds.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// test_accuracy, robust_accuracy or train_loss
        #[arg(long, default_value = "test_accuracy")]
        metric: String,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        /// Also write budgets.csv and thresholds.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_experiment(path: &Path) -> Result<Experiment> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Experiment::from_checkpoint(&ck).with_context(|| format!("restoring {}", path.display()))
}

fn train(config: &Path, out: &Path, resume: bool, stop_after: Option<usize>) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_path(config)?;
    let exp = train_to_dir(cfg, out, &TrainOptions { resume, stop_after })?;
    let n = exp.epochs_completed();
    match exp.metrics().last() {
        Some(m) => {
            let robust = m.robust_accuracy.map(|r| format!(" robust_accuracy={r:.4}")).unwrap_or_default();
            println!("epoch {n}: train_loss={:.6} test_accuracy={:.4}{robust}", m.train_loss, m.test_accuracy);
        }
        None => println!("no epochs run"),
    }
    if let Some(f) = exp.fault() {
        eprintln!("run stopped: {f}");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn diagnose(
    checkpoints: &[PathBuf],
    measure: MeasureArg,
    std: f64,
    replicates: usize,
    batch_size: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if replicates == 0 {
        bail!("--replicates must be at least 1");
    }
    let measure = match measure {
        MeasureArg::Variance => Measure::Variance,
        MeasureArg::Correlation => Measure::Correlation,
    };
    let mut report = DiagnosticReport::new(measure, std, seed);
    let mut fingerprint: Option<String> = None;
    for (i, path) in checkpoints.iter().enumerate() {
        let exp = load_experiment(path)?;
        match &fingerprint {
            Some(f) if f != exp.fingerprint() => bail!("{} was trained on a different dataset", path.display()),
            _ => fingerprint = Some(exp.fingerprint().to_string()),
        }
        let b = batch_size.unwrap_or(exp.config().training.batch_size).min(exp.train_data().len());
        report.add_checkpoint(exp.params(), exp.mask(), exp.train_data(), b, replicates, i as u64)?;
    }
    let name = match measure {
        Measure::Variance => "variance",
        Measure::Correlation => "correlation",
    };
    println!("{:>10}  {:>14}", "sparsity", format!("mean {name}"));
    for level in report.levels() {
        println!("{level:>10.4}  {:>14.6e}", report.mean_at(level).expect("level has rows"));
    }
    if let Some(path) = out {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(file)?;
    }
    Ok(())
}

fn attack_eval(path: &Path, cfg: AttackConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let exp = load_experiment(path)?;
    let clean = nn::accuracy(exp.params(), exp.test_data());
    let robust = robust_accuracy(exp.params(), exp.test_data(), &cfg, &mut RngStream::new(seed));
    println!("clean/robust accuracy (%): {:.2}/{:.2}", 100.0 * clean, 100.0 * robust);
    Ok(())
}

fn run_compare(
    runs: &[PathBuf],
    metric: &str,
    budgets: &[usize],
    thresholds: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    let metric = Metric::parse(metric)?;
    let records = runs.iter().map(|d| load_run(d)).collect::<agentopt::Result<Vec<_>>>()?;
    let table = compare(&records, metric, budgets, thresholds)?;
    print!("{}", table.to_text());
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("budgets.csv"), table.budget_csv())?;
        fs::write(dir.join("thresholds.csv"), table.threshold_csv())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, resume, stop_after } => train(&config, &out, resume, stop_after),
        Command::Diagnose { checkpoint, measure, std, replicates, batch_size, seed, out } => {
            diagnose(&checkpoint, measure, std, replicates, batch_size, seed, out.as_deref()).map(|_| ExitCode::SUCCESS)
        }
        Command::AttackEval { checkpoint, eps, iters, restarts, step, no_random_start, seed } => {
            let cfg = AttackConfig {
                epsilon: eps,
                step_size: step,
                iterations: iters,
                random_start: !no_random_start,
                restarts,
            };
            attack_eval(&checkpoint, cfg, seed).map(|_| ExitCode::SUCCESS)
        }
        Command::Compare { runs, metric, budgets, thresholds, out } => {
            run_compare(&runs, &metric, &budgets, &thresholds, out.as_deref()).map(|_| ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
