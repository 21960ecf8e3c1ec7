//! Experiment driver: generate synthetic multi-rater datasets, train the
//! model families, evaluate their prediction distributions, and compare runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use punet::commands::{
    self, ComparisonReport, DataReport, EvalOptions, EvalOutput, SweepKind, SweepReport,
    TrainedRun,
};
use punet::metrics::Summary;

#[derive(Parser)]
#[command(
    name = "punet",
    version,
    about = "Probabilistic U-Net experiments on synthetic multi-rater segmentation data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of images with multiple rater masks.
    GenData {
        /// Dataset settings (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory to write the dataset into.
        #[arg(long)]
        out: PathBuf,
        /// Override the settings' seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model family described by an experiment config.
    Train {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Run directory for the checkpoint, logs, and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained run on the test split.
    Eval {
        /// Run directory produced by `train`.
        run_dir: PathBuf,
        /// Evaluate on a different dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Prediction samples per test image.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Override the config's seed for prediction sampling.
        #[arg(long)]
        seed: Option<u64>,
        /// Score the label set against itself instead of the model.
        #[arg(long)]
        self_check: bool,
    },
    /// Compare evaluated runs with paired Wilcoxon signed-rank tests.
    Compare {
        /// Two or more run directories that have been evaluated.
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
        /// Significance level for calling two runs different.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and evaluate one run per value of a single swept knob.
    Sweep {
        /// Which knob to sweep.
        #[arg(value_enum)]
        kind: SweepKindArg,
        /// Experiment config (TOML) for the base run.
        config: PathBuf,
        /// Directory that receives one run directory per swept value.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKindArg {
    /// Covariance factor rank from 1 to latent_dim - 1.
    Rank,
    /// Number of raters used for training, from 1 to all.
    Raters,
}

impl From<SweepKindArg> for SweepKind {
    fn from(kind: SweepKindArg) -> Self {
        match kind {
            SweepKindArg::Rank => SweepKind::Rank,
            SweepKindArg::Raters => SweepKind::Raters,
        }
    }
}

fn main() -> ExitCode {
    // die quietly when the consumer closes the pipe (`punet eval ... | head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> punet::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let report = commands::gen_data(config.as_deref(), &out, seed)?;
            print_data_report(&report);
        }
        Command::Train { config, out, seed } => {
            let trained = commands::train_cmd(&config, &out, seed, true)?;
            print_trained(&trained);
        }
        Command::Eval { run_dir, dataset, n_samples, seed, self_check } => {
            let options = EvalOptions { dataset, n_samples, seed, self_check };
            let output = commands::eval_cmd(&run_dir, &options)?;
            print_eval(&run_dir, &output);
        }
        Command::Compare { run_dirs, alpha, json } => {
            let report = commands::compare_cmd(&run_dirs, alpha, json.as_deref())?;
            print_comparison(&report);
        }
        Command::Sweep { kind, config, out, seed } => {
            let report = commands::sweep_cmd(kind.into(), &config, &out, seed, true)?;
            print_sweep(&out, &report);
        }
    }
    Ok(())
}

fn print_data_report(report: &DataReport) {
    println!("dataset written to {}", report.out_dir.display());
    for split in &report.splits {
        println!(
            "  {:<5} {:>4} samples, mean label diversity {:.4}",
            split.name, split.count, split.mean_label_diversity
        );
        let buckets: Vec<String> = split
            .bucket_histogram
            .iter()
            .map(|(b, c)| format!("{b}:{c}"))
            .collect();
        println!("        samples by raters marking the object: {}", buckets.join("  "));
    }
}

fn print_trained(trained: &TrainedRun) {
    for m in &trained.members {
        println!(
            "{}: best epoch {} of {} (val loss {:.4}) -> {}",
            m.label,
            m.best_epoch,
            m.epochs_run,
            m.best_val_loss,
            m.checkpoint.display()
        );
    }
}

fn stat_line(name: &str, s: &Summary) -> String {
    format!(
        "  {:<16} median {:>8.4}  mean {:>8.4}  IQR [{:.4}, {:.4}]",
        name, s.median, s.mean, s.q1, s.q3
    )
}

fn print_eval(run_dir: &std::path::Path, output: &EvalOutput) {
    let s = &output.summary;
    let what = if s.self_check {
        "labels scored against themselves".to_string()
    } else {
        format!("family {} with {} samples per image", s.family, s.n_samples)
    };
    println!("{}: {} test images, {what}", run_dir.display(), s.score.count);
    println!("{}", stat_line("score", &s.score));
    println!("{}", stat_line("cross term", &s.cross));
    println!("{}", stat_line("pred diversity", &s.pred_diversity));
    println!("{}", stat_line("label diversity", &s.label_diversity));
    println!("  score by raters marking the object:");
    for b in &s.by_bucket {
        println!(
            "    {}: median {:.4} over {} samples",
            b.bucket, b.score.median, b.score.count
        );
    }
}

fn print_comparison(report: &ComparisonReport) {
    println!("{:<40} {:<14} {:>5} {:>10}", "run", "family", "n", "median");
    for run in &report.runs {
        println!(
            "{:<40} {:<14} {:>5} {:>10.4}",
            run.label, run.family, run.count, run.median
        );
    }
    println!("pairwise wilcoxon signed-rank (two-sided):");
    for pair in &report.pairs {
        println!(
            "  {} vs {}: W+ = {:.1}, p = {:.4} ({}, n = {})",
            pair.a, pair.b, pair.statistic, pair.p_value, pair.method, pair.n_used
        );
    }
    println!("best (lowest median score): {}", report.best);
    if report.tied_with_best.is_empty() {
        println!("no ties at alpha = {}", report.alpha);
    } else {
        println!(
            "statistically tied at alpha = {}: {}",
            report.alpha,
            report.tied_with_best.join(", ")
        );
    }
}

fn print_sweep(out: &std::path::Path, report: &SweepReport) {
    println!("{:<12} {:>5} {:>10} {:>10} {:>10} {:>12}", report.knob, "n", "median", "q1", "q3", "val loss");
    for p in &report.points {
        println!(
            "{:<12} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>12.4}",
            p.value, p.score.count, p.score.median, p.score.q1, p.score.q3, p.best_val_loss
        );
    }
    println!("per-point runs and sweep.csv written under {}", out.display());
}
