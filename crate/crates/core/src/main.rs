use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use osl_lab::cli;

/// Training lab for dense networks with an orthogonal softmax
/// classification layer: seeded multi-round experiments, sweeps, paired
/// t-tests and spectral-norm bound checks.
#[derive(Parser)]
#[command(name = "osl-lab", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm of an experiment config; writes results.jsonl,
    /// summary.json, boxplot.csv and angles.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Parallel rounds (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Paired t-test between two results.jsonl files.
    Compare {
        results_a: PathBuf,
        results_b: PathBuf,
        /// Arm to pick from the first file (needed when it has several).
        #[arg(long)]
        arm_a: Option<String>,
        /// Arm to pick from the second file.
        #[arg(long)]
        arm_b: Option<String>,
    },
    /// Re-run the config while varying one axis; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// width (hidden neurons), depth (dash-separated stacks like
        /// 64-32-8) or reduction (training samples removed per class).
        #[arg(long)]
        axis: cli::SweepAxis,
        /// Values for the chosen axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Monte-Carlo check of the spectral-norm bounds of the masked
    /// classification layer; writes verify.json.
    Verify {
        /// Input width of the classification layer.
        #[arg(long, default_value_t = 32)]
        d: usize,
        /// Number of classes.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Entrywise weight bound B.
        #[arg(long, default_value_t = 1.0)]
        bound: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic blob dataset as a feature CSV.
    GenData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 40)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0.65)]
        noise_scale: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: Args) -> osl_lab::Result<i32> {
    match args.command {
        Command::Train { config, out, workers } => {
            let report = cli::cmd_train(&config, &out, workers)?;
            println!(
                "wrote {} round records to {} (config {})",
                report.records,
                report.out_dir.display(),
                &report.config_hash[..12]
            );
            if report.failures > 0 {
                eprintln!("{} rounds failed", report.failures);
                return Ok(2);
            }
            Ok(0)
        }
        Command::Compare {
            results_a,
            results_b,
            arm_a,
            arm_b,
        } => {
            let report = cli::cmd_compare(
                &results_a,
                &results_b,
                arm_a.as_deref(),
                arm_b.as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            println!(
                "verdict: {} at level 0.05",
                if report.significant { "significant" } else { "not significant" }
            );
            Ok(0)
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            workers,
        } => {
            let rows = cli::cmd_sweep(&config, axis, &values, &out, workers)?;
            for row in &rows {
                println!(
                    "{:>8}  {:<12} mean={} std={} {}",
                    row.value,
                    row.arm,
                    row.mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    row.std.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    row.note
                );
            }
            Ok(0)
        }
        Command::Verify {
            d,
            k,
            bound,
            trials,
            seed,
            out,
        } => {
            let report = cli::cmd_verify(d, k, bound, trials, seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.violations > 0 {
                eprintln!("bound violations detected: the implementation is wrong somewhere");
                return Ok(2);
            }
            Ok(0)
        }
        Command::GenData {
            classes,
            dim,
            train_per_class,
            test_per_class,
            noise_scale,
            seed,
            out,
        } => {
            let n = cli::cmd_gen_data(
                classes,
                dim,
                train_per_class,
                test_per_class,
                noise_scale,
                seed,
                &out,
            )?;
            println!("wrote {n} samples to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
