//! Subcommand implementations behind the binary: running experiment
//! configs, comparing result files, sweeping an axis, verifying the norm
//! bounds, and generating synthetic feature CSVs.
//!
//! Every writer here is deterministic: rerunning a config reproduces the
//! output files byte for byte except wall-time fields.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    aggregate_values, angle_matrix, paired_ttest, verify_norm_bounds, Aggregate, NormBoundReport,
    TTestReport,
};
use crate::config::{hash_of, ArmConfig, DataConfig, ExperimentConfig};
use crate::data::{generate_blobs, write_features};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::training::{run_rounds, ClassifierKind, RunResult};

/// One line of results.jsonl.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub arm: String,
    pub round: usize,
    #[serde(flatten)]
    pub result: RunResult,
}

#[derive(Clone, Debug, Serialize)]
struct ArmSummary {
    name: String,
    aggregate: Aggregate,
    mean_final_train_loss: f64,
    failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
struct ExperimentSummary {
    config_hash: String,
    base_seed: u64,
    rounds: usize,
    arms: Vec<ArmSummary>,
}

#[derive(Clone, Debug, Serialize)]
struct ArmAngles {
    arm: String,
    /// Angle matrices of the rounds with minimum, median and maximum test
    /// accuracy, in that order.
    selected_rounds: Vec<RoundAngles>,
    /// Aggregate over upper-triangle off-diagonal angles of all rounds.
    off_diagonal: Aggregate,
}

#[derive(Clone, Debug, Serialize)]
struct RoundAngles {
    round: usize,
    test_acc: f64,
    degrees: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
struct AnglesFile {
    config_hash: String,
    base_seed: u64,
    arms: Vec<ArmAngles>,
}

/// Outcome of `cmd_train` kept for tests and callers.
pub struct TrainReport {
    pub config_hash: String,
    pub records: usize,
    pub failures: usize,
    pub out_dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

/// Run every arm of an experiment config and write results.jsonl,
/// summary.json, boxplot.csv and (for orthogonal-classifier arms)
/// angles.json into `out_dir`.
pub fn cmd_train(config_path: &Path, out_dir: &Path, workers: Option<usize>) -> Result<TrainReport> {
    let config = ExperimentConfig::load(config_path)?;
    let config_hash = config.hash();
    let workers = workers.unwrap_or(config.workers);
    let provider = config.data.provider()?;
    for warning in provider.warnings() {
        eprintln!("warning: {warning}");
    }
    let input_dim = provider.dim();
    let class_count = provider.class_count();

    let mut jsonl = String::new();
    let mut summaries = Vec::new();
    let mut angle_entries = Vec::new();
    let mut total_records = 0usize;
    let mut total_failures = 0usize;

    for arm in &config.arms {
        let spec = arm.model_spec(input_dim);
        spec.validate(class_count)
            .map_err(|e| Error::Config(format!("arm {:?}: {e}", arm.name)))?;
        let train_config = arm.train_config(&config.train);
        let outcomes = run_rounds(
            &spec,
            &train_config,
            &provider,
            config.rounds,
            workers,
            &config_hash,
        )?;

        let mut results = Vec::new();
        let mut weights: Vec<(usize, f64, Matrix)> = Vec::new();
        let mut failures = Vec::new();
        for outcome in &outcomes {
            match &outcome.outcome {
                Ok(success) => {
                    jsonl.push_str(&to_json_line(&RoundRecord {
                        arm: arm.name.clone(),
                        round: outcome.round,
                        result: success.result.clone(),
                    })?);
                    jsonl.push('\n');
                    total_records += 1;
                    results.push(success.result.clone());
                    weights.push((
                        outcome.round,
                        success.result.test_acc,
                        success.classifier_weights.clone(),
                    ));
                }
                Err(e) => {
                    let message = format!("round {}: {e}", outcome.round);
                    eprintln!("arm {:?} {message}", arm.name);
                    failures.push(message);
                    total_failures += 1;
                }
            }
        }
        if results.is_empty() {
            return Err(Error::State(format!("arm {:?}: every round failed", arm.name)));
        }
        let aggregate = crate::analysis::aggregate(&results)?;
        let mean_final_train_loss =
            results.iter().map(|r| r.final_train_loss).sum::<f64>() / results.len() as f64;
        summaries.push(ArmSummary {
            name: arm.name.clone(),
            aggregate,
            mean_final_train_loss,
            failures,
        });

        if arm.classifier == ClassifierKind::Osl {
            angle_entries.push(arm_angles(&arm.name, &weights)?);
        }
    }

    write_text(&out_dir.join("results.jsonl"), &jsonl)?;
    let summary = ExperimentSummary {
        config_hash: config_hash.clone(),
        base_seed: config.train.seed,
        rounds: config.rounds,
        arms: summaries,
    };
    write_text(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    write_text(&out_dir.join("boxplot.csv"), &boxplot_csv(&summary))?;
    if !angle_entries.is_empty() {
        let angles = AnglesFile {
            config_hash: config_hash.clone(),
            base_seed: config.train.seed,
            arms: angle_entries,
        };
        write_text(
            &out_dir.join("angles.json"),
            &serde_json::to_string_pretty(&angles)?,
        )?;
    }
    Ok(TrainReport {
        config_hash,
        records: total_records,
        failures: total_failures,
        out_dir: out_dir.to_path_buf(),
    })
}

fn arm_angles(name: &str, weights: &[(usize, f64, Matrix)]) -> Result<ArmAngles> {
    let mut by_acc = weights.to_vec();
    by_acc.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite accuracy"));
    let picks = [
        by_acc.first().expect("nonempty"),
        &by_acc[by_acc.len() / 2],
        by_acc.last().expect("nonempty"),
    ];
    let mut selected_rounds = Vec::new();
    for (round, acc, w) in picks {
        selected_rounds.push(RoundAngles {
            round: *round,
            test_acc: *acc,
            degrees: angle_matrix(w)?.degrees,
        });
    }
    let mut off_diag = Vec::new();
    for (_, _, w) in weights {
        off_diag.extend(angle_matrix(w)?.off_diagonal());
    }
    Ok(ArmAngles {
        arm: name.to_string(),
        selected_rounds,
        off_diagonal: aggregate_values(&off_diag)?,
    })
}

fn boxplot_csv(summary: &ExperimentSummary) -> String {
    let mut out = String::from(format!(
        "# config_hash={} seed={}\n",
        summary.config_hash, summary.base_seed
    ));
    out.push_str("arm,n,mean,std,min,q1,median,q3,max,outliers\n");
    for arm in &summary.arms {
        let a = &arm.aggregate;
        let outliers = a
            .outliers
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            arm.name, a.n, a.mean, a.std, a.min, a.q1, a.median, a.q3, a.max, outliers
        )
        .expect("string write");
    }
    out
}

// ---------------------------------------------------------------------------
// compare

fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RoundRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: format!("{}: no records", path.display()),
        });
    }
    Ok(records)
}

fn select_arm(records: Vec<RoundRecord>, arm: Option<&str>, path: &Path) -> Result<Vec<RoundRecord>> {
    let mut names: Vec<String> = records.iter().map(|r| r.arm.clone()).collect();
    names.sort();
    names.dedup();
    let selected = match arm {
        Some(name) => {
            if !names.iter().any(|n| n == name) {
                return Err(Error::Argument(format!(
                    "arm {name:?} not found in {} (has {names:?})",
                    path.display()
                )));
            }
            name.to_string()
        }
        None => {
            if names.len() > 1 {
                return Err(Error::Argument(format!(
                    "{} holds arms {names:?}; pick one with --arm-a/--arm-b",
                    path.display()
                )));
            }
            names[0].clone()
        }
    };
    let mut chosen: Vec<RoundRecord> =
        records.into_iter().filter(|r| r.arm == selected).collect();
    chosen.sort_by_key(|r| r.round);
    Ok(chosen)
}

/// Paired t-test between two result files (per-round test accuracies,
/// paired by round with matching seeds).
pub fn cmd_compare(
    path_a: &Path,
    path_b: &Path,
    arm_a: Option<&str>,
    arm_b: Option<&str>,
) -> Result<TTestReport> {
    let a = select_arm(read_records(path_a)?, arm_a, path_a)?;
    let b = select_arm(read_records(path_b)?, arm_b, path_b)?;
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "pairing error: {} rounds vs {} rounds",
            a.len(),
            b.len()
        )));
    }
    for (ra, rb) in a.iter().zip(&b) {
        if ra.round != rb.round || ra.result.seed != rb.result.seed {
            return Err(Error::Argument(format!(
                "pairing error at round {}: seeds {} vs {}",
                ra.round, ra.result.seed, rb.result.seed
            )));
        }
    }
    let accs_a: Vec<f64> = a.iter().map(|r| r.result.test_acc).collect();
    let accs_b: Vec<f64> = b.iter().map(|r| r.result.test_acc).collect();
    paired_ttest(&accs_a, &accs_b)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Width,
    Depth,
    Reduction,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width" => Ok(SweepAxis::Width),
            "depth" => Ok(SweepAxis::Depth),
            "reduction" => Ok(SweepAxis::Reduction),
            other => Err(Error::Argument(format!(
                "unknown sweep axis {other:?} (expected width, depth or reduction)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub arm: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub note: String,
}

fn parse_stack(value: &str) -> Result<Vec<usize>> {
    value
        .split('-')
        .map(|part| {
            part.parse::<usize>().map_err(|_| {
                Error::Argument(format!("bad width stack {value:?}: {part:?} is not a count"))
            })
        })
        .collect()
}

/// Sweep one axis over the given values, training every arm per value.
/// Writes sweep.csv rows shaped (value, arm, mean, std, note).
pub fn cmd_sweep(
    config_path: &Path,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let config = ExperimentConfig::load(config_path)?;
    let config_hash = config.hash();
    let workers = workers.unwrap_or(config.workers);

    let mut rows = Vec::new();
    for value in values {
        let (data, arm_edit): (DataConfig, Box<dyn Fn(&ArmConfig) -> ArmConfig>) = match axis {
            SweepAxis::Width => {
                let width: usize = value.parse().map_err(|_| {
                    Error::Argument(format!("width value {value:?} is not a count"))
                })?;
                (
                    config.data.clone(),
                    Box::new(move |arm| {
                        let mut arm = arm.clone();
                        *arm.hidden_widths.last_mut().expect("validated nonempty") = width;
                        arm
                    }),
                )
            }
            SweepAxis::Depth => {
                let stack = parse_stack(value)?;
                (
                    config.data.clone(),
                    Box::new(move |arm| {
                        let mut arm = arm.clone();
                        arm.hidden_widths = stack.clone();
                        arm
                    }),
                )
            }
            SweepAxis::Reduction => {
                let n: usize = value.parse().map_err(|_| {
                    Error::Argument(format!("reduction value {value:?} is not a count"))
                })?;
                (
                    config.data.with_reduction(n),
                    Box::new(|arm| arm.clone()),
                )
            }
        };

        let provider = data.provider()?;
        let input_dim = provider.dim();
        let class_count = provider.class_count();
        for arm in &config.arms {
            let arm = arm_edit(arm);
            let spec = arm.model_spec(input_dim);
            if let Err(e) = spec.validate(class_count) {
                rows.push(SweepRow {
                    value: value.clone(),
                    arm: arm.name.clone(),
                    mean: None,
                    std: None,
                    note: format!("skipped: {e}"),
                });
                continue;
            }
            let train_config = arm.train_config(&config.train);
            let outcomes = run_rounds(
                &spec,
                &train_config,
                &provider,
                config.rounds,
                workers,
                &config_hash,
            )?;
            let results: Vec<RunResult> = outcomes
                .iter()
                .filter_map(|o| o.outcome.as_ref().ok().map(|s| s.result.clone()))
                .collect();
            let failed = outcomes.len() - results.len();
            if results.is_empty() {
                rows.push(SweepRow {
                    value: value.clone(),
                    arm: arm.name.clone(),
                    mean: None,
                    std: None,
                    note: "skipped: every round failed".into(),
                });
                continue;
            }
            let agg = crate::analysis::aggregate(&results)?;
            rows.push(SweepRow {
                value: value.clone(),
                arm: arm.name.clone(),
                mean: Some(agg.mean),
                std: Some(agg.std),
                note: if failed > 0 {
                    format!("{failed} rounds failed")
                } else {
                    String::new()
                },
            });
        }
    }

    let mut csv = format!(
        "# config_hash={} seed={} axis={:?}\n",
        config_hash, config.train.seed, axis
    );
    csv.push_str("value,arm,mean,std,note\n");
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.value,
            row.arm,
            row.mean.map(|v| v.to_string()).unwrap_or_default(),
            row.std.map(|v| v.to_string()).unwrap_or_default(),
            row.note
        )
        .expect("string write");
    }
    write_text(&out_dir.join("sweep.csv"), &csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// verify

#[derive(Clone, Debug, Serialize)]
struct VerifyFile {
    params_hash: String,
    #[serde(flatten)]
    report: NormBoundReport,
}

/// Monte-Carlo verification of the masked/full spectral-norm bounds;
/// writes verify.json and returns the report.
pub fn cmd_verify(
    d: usize,
    k: usize,
    bound: f64,
    trials: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<NormBoundReport> {
    let report = verify_norm_bounds(d, k, bound, trials, seed)?;
    let file = VerifyFile {
        params_hash: hash_of(&(d, k, bound.to_bits(), trials, seed)),
        report: report.clone(),
    };
    write_text(
        &out_dir.join("verify.json"),
        &serde_json::to_string_pretty(&file)?,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// gen-data

/// Generate a synthetic blob dataset and write it as a feature CSV.
#[allow(clippy::too_many_arguments)]
pub fn cmd_gen_data(
    classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise_scale: f64,
    seed: u64,
    out_file: &Path,
) -> Result<usize> {
    let data = generate_blobs(classes, dim, train_per_class, test_per_class, noise_scale, seed)?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    write_features(out_file, &data)?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_axis_parses() {
        assert_eq!("width".parse::<SweepAxis>().unwrap(), SweepAxis::Width);
        assert_eq!("depth".parse::<SweepAxis>().unwrap(), SweepAxis::Depth);
        assert_eq!(
            "reduction".parse::<SweepAxis>().unwrap(),
            SweepAxis::Reduction
        );
        assert!("wat".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn stack_parser() {
        assert_eq!(parse_stack("64-32-8").unwrap(), vec![64, 32, 8]);
        assert!(parse_stack("64-x").is_err());
    }
}
