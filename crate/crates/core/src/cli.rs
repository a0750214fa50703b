//! Config-driven command-line front end: benchmark generation, run
//! execution, ablation sweeps, checkpoint re-scoring, and report
//! conversion.
//!
//! Exit-code contract (stable): 0 success, 2 config/input error, 3 numeric
//! abort, 4 I/O or integrity error. No command mutates its input files.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::continual::{evaluate_checkpoint, run_experiment, write_report, RunOutput};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ProtocolKind};
use crate::synthworld::{generate_benchmark, load_benchmark, save_benchmark, Benchmark};
use crate::util::BUILD_VERSION;

/// Desk-scale continual concept-injection engine.
#[derive(Debug, Parser)]
#[command(name = "noinject", version = BUILD_VERSION)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a benchmark file from a config.
    Gen {
        /// Config file (TOML; unknown keys rejected).
        #[arg(long)]
        config: PathBuf,
        /// Output path for the benchmark JSON.
        #[arg(long)]
        out: PathBuf,
        /// Override the benchmark generation seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train on the common pool, then run the full injection sequence.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Benchmark file produced by `gen` from the same config.
        #[arg(long)]
        benchmark: PathBuf,
        /// Output directory for log, checkpoints and report.
        #[arg(long)]
        out: PathBuf,
        /// Override the run (training) seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Replay the whole task sequence a second time after the first pass.
        #[arg(long)]
        second_round: bool,
    },
    /// One full run per axis value; per-value artifacts plus a summary table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Shared benchmark file (not allowed for axis common_set_seed,
        /// which regenerates the common pool per value; omit to generate
        /// from the config).
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Output directory; each value runs in its own subdirectory.
        #[arg(long)]
        out: PathBuf,
        /// Override the run (training) seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Replay the whole task sequence a second time in every run.
        #[arg(long)]
        second_round: bool,
        /// Which knob to sweep.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Re-score a saved checkpoint against its benchmark.
    Eval {
        /// Checkpoint file written by `run`.
        checkpoint: PathBuf,
        /// The benchmark the checkpoint was trained on.
        #[arg(long)]
        benchmark: PathBuf,
        /// Directory to write report.json / report.csv into
        /// (default: print the report JSON to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a report JSON to its CSV matrix.
    Report {
        /// report.json written by `run` or `eval`.
        report: PathBuf,
        /// File to write the CSV to (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Sweepable knobs. `r` is the update ratio, `k_layers` the number of
/// trainable encoder layers, `common_set_seed` the common-pool draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    R,
    #[value(name = "k_layers")]
    KLayers,
    #[value(name = "common_set_seed")]
    CommonSetSeed,
}

impl SweepAxis {
    fn tag(self) -> &'static str {
        match self {
            SweepAxis::R => "r",
            SweepAxis::KLayers => "k_layers",
            SweepAxis::CommonSetSeed => "common_set_seed",
        }
    }
}

/// Run one parsed command to completion.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Run {
            config,
            benchmark,
            out,
            seed,
            second_round,
        } => cmd_run(&config, &benchmark, &out, seed, second_round),
        Command::Sweep {
            config,
            benchmark,
            out,
            seed,
            second_round,
            axis,
            values,
        } => cmd_sweep(
            &config,
            benchmark.as_deref(),
            &out,
            seed,
            second_round,
            axis,
            &values,
        ),
        Command::Eval {
            checkpoint,
            benchmark,
            out,
        } => cmd_eval(&checkpoint, &benchmark, out.as_deref()),
        Command::Report { report, out } => cmd_report(&report, out.as_deref()),
    }
}

fn generate_from(config: &RunConfig) -> Result<Benchmark> {
    generate_benchmark(
        &config.benchmark,
        config.model.d_v,
        config.model.v_tok,
        config.model.max_tokens,
        config.seeds.benchmark,
        config.seeds.common_seed(),
    )
}

fn cmd_gen(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        config.seeds.benchmark = s;
    }
    config.validate()?;
    if out == config_path {
        return Err(Error::Input(
            "refusing to overwrite the config file with the benchmark; pick another --out"
                .to_string(),
        ));
    }
    let bench = generate_from(&config)?;
    bench.validate()?;
    save_benchmark(&bench, out)?;

    let novel_train: usize = bench.tasks.iter().map(|t| t.train.len()).sum();
    let novel_test: usize = bench.tasks.iter().map(|t| t.test.len()).sum();
    println!(
        "benchmark: {} tasks, {} novel concepts, {} common concepts",
        bench.tasks.len(),
        bench.total_novel_concepts(),
        bench.common_pool.len()
    );
    println!(
        "samples: {novel_train} novel train, {novel_test} novel test, {} common test",
        bench.common_test.len()
    );
    println!(
        "checksum {:016x}; written to {}",
        bench.checksum()?,
        out.display()
    );
    Ok(())
}

/// Final-stage common-pool retention cell, if the run got that far.
fn final_retention(report: &MetricsReport) -> Option<(f64, f64)> {
    report
        .cells
        .iter()
        .find(|c| c.stage == report.stages_completed && c.protocol == ProtocolKind::OvdRetention)
        .map(|c| (c.top1, c.mrr))
}

fn print_run_summary(out_dir: &Path, output: &RunOutput) {
    if let Some(p) = &output.pretrain {
        println!(
            "pretrain: {} steps, common top-1 {:.4}{}",
            p.steps,
            p.top1,
            if p.target_reached { "" } else { " (target not reached)" }
        );
    }
    let report = &output.report;
    println!(
        "run complete: {} stages, {} evaluation cells",
        report.stages_completed,
        report.cells.len()
    );
    if let (Some(t), Some(m)) = (report.final_avg_top1, report.final_avg_mrr) {
        println!("final novel average: top-1 {t:.4}, mrr {m:.4}");
    }
    if let Some((t, m)) = final_retention(report) {
        println!("final common retention: top-1 {t:.4}, mrr {m:.4}");
    }
    println!("artifacts in {}", out_dir.display());
}

fn cmd_run(
    config_path: &Path,
    benchmark_path: &Path,
    out: &Path,
    seed: Option<u64>,
    second_round: bool,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        config.seeds.run = s;
    }
    if second_round {
        config.training.second_round = true;
    }
    config.validate()?;
    let bench = load_benchmark(benchmark_path)?;
    log::info!(
        "starting run: {} tasks, {} rounds, run seed {}",
        bench.tasks.len(),
        if config.training.second_round { 2 } else { 1 },
        config.seeds.run
    );
    let output = run_experiment(&config, bench, Some(out))?;
    print_run_summary(out, &output);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, benchmark_path: &Path, out: Option<&Path>) -> Result<()> {
    let bench = load_benchmark(benchmark_path)?;
    let report = evaluate_checkpoint(checkpoint, bench)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| {
                Error::io_context(format!("cannot create output dir '{}'", dir.display()), e)
            })?;
            write_report(&report, dir)?;
            println!("wrote report.json and report.csv to {}", dir.display());
        }
        None => {
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Structural(format!("report serialization failed: {e}")))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn cmd_report(report_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(report_path)
        .map_err(|e| Error::io_context(format!("cannot read '{}'", report_path.display()), e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| {
        Error::Input(format!(
            "'{}' is not a run report: {e}",
            report_path.display()
        ))
    })?;
    let csv = report.to_csv();
    match out {
        Some(path) => {
            if path == report_path {
                return Err(Error::Input(
                    "refusing to overwrite the input report; pick another --out".to_string(),
                ));
            }
            std::fs::write(path, csv)
                .map_err(|e| Error::io_context(format!("cannot write '{}'", path.display()), e))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// One parsed sweep value, keeping the user's literal token for naming.
#[derive(Debug, Clone)]
enum SweepValue {
    R(f64),
    KLayers(usize),
    CommonSetSeed(u64),
}

fn parse_values(axis: SweepAxis, raw: &[String]) -> Result<Vec<(String, SweepValue)>> {
    if raw.is_empty() {
        return Err(Error::Input(
            "sweep needs at least one value (--values v1,v2,...)".to_string(),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    raw.iter()
        .map(|tok| {
            let tok = tok.trim();
            if !seen.insert(tok.to_string()) {
                return Err(Error::Input(format!("duplicate sweep value '{tok}'")));
            }
            let value = match axis {
                SweepAxis::R => SweepValue::R(tok.parse().map_err(|_| {
                    Error::Input(format!("axis r expects decimal values, got '{tok}'"))
                })?),
                SweepAxis::KLayers => SweepValue::KLayers(tok.parse().map_err(|_| {
                    Error::Input(format!(
                        "axis k_layers expects non-negative integers, got '{tok}'"
                    ))
                })?),
                SweepAxis::CommonSetSeed => SweepValue::CommonSetSeed(tok.parse().map_err(
                    |_| {
                        Error::Input(format!(
                            "axis common_set_seed expects non-negative integers, got '{tok}'"
                        ))
                    },
                )?),
            };
            Ok((tok.to_string(), value))
        })
        .collect()
}

fn apply_value(config: &mut RunConfig, value: &SweepValue) {
    match value {
        SweepValue::R(v) => config.training.r_update_ratio = *v,
        SweepValue::KLayers(v) => config.model.k_trainable = *v,
        SweepValue::CommonSetSeed(v) => config.seeds.common = Some(*v),
    }
}

/// Worker-thread cap for sweeps: NOINJECT_THREADS if set, else the
/// machine's available parallelism, never more than the number of jobs.
fn thread_cap(env_value: Option<&str>, n_jobs: usize) -> Result<usize> {
    let cap = match env_value {
        Some(s) => {
            let v: usize = s.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "NOINJECT_THREADS must be a positive integer, got '{s}'"
                ))
            })?;
            if v == 0 {
                return Err(Error::Config(
                    "NOINJECT_THREADS must be a positive integer, got '0'".to_string(),
                ));
            }
            v
        }
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    };
    Ok(cap.min(n_jobs).max(1))
}

#[derive(Debug, Serialize)]
struct SweepRow {
    value: String,
    final_avg_top1: Option<f64>,
    final_avg_mrr: Option<f64>,
    retention_top1: f64,
    retention_mrr: f64,
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    version: String,
    axis: String,
    rows: Vec<SweepRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_sweep(
    config_path: &Path,
    benchmark_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    second_round: bool,
    axis: SweepAxis,
    values: &[String],
) -> Result<()> {
    let mut base = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        base.seeds.run = s;
    }
    if second_round {
        base.training.second_round = true;
    }
    base.validate()?;
    let parsed = parse_values(axis, values)?;

    // The benchmark is shared across values except on the common-pool axis,
    // where each value means a different common draw.
    let shared: Option<Benchmark> = match axis {
        SweepAxis::CommonSetSeed => {
            if benchmark_path.is_some() {
                return Err(Error::Input(
                    "axis common_set_seed regenerates the benchmark per value; drop --benchmark"
                        .to_string(),
                ));
            }
            None
        }
        _ => Some(match benchmark_path {
            Some(p) => load_benchmark(p)?,
            None => generate_from(&base)?,
        }),
    };

    std::fs::create_dir_all(out).map_err(|e| {
        Error::io_context(format!("cannot create output dir '{}'", out.display()), e)
    })?;

    let cap = thread_cap(
        std::env::var("NOINJECT_THREADS").ok().as_deref(),
        parsed.len(),
    )?;
    log::info!(
        "sweeping {} over {} values with {} worker(s)",
        axis.tag(),
        parsed.len(),
        cap
    );

    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<SweepRow>>>> =
        parsed.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..cap {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((token, value)) = parsed.get(i) else {
                    break;
                };
                let mut config = base.clone();
                apply_value(&mut config, value);
                let dir = out.join(format!("{}_{}", axis.tag(), token));
                let result = (|| -> Result<SweepRow> {
                    let bench = match &shared {
                        Some(b) => b.clone(),
                        None => generate_from(&config)?,
                    };
                    let output = run_experiment(&config, bench, Some(&dir))?;
                    let report = &output.report;
                    let (retention_top1, retention_mrr) =
                        final_retention(report).ok_or_else(|| {
                            Error::Structural(
                                "run finished without a retention cell".to_string(),
                            )
                        })?;
                    log::info!(
                        "{}={} done: final_avg_top1 {}, retention_top1 {}",
                        axis.tag(),
                        token,
                        fmt_opt(report.final_avg_top1),
                        retention_top1
                    );
                    Ok(SweepRow {
                        value: token.clone(),
                        final_avg_top1: report.final_avg_top1,
                        final_avg_mrr: report.final_avg_mrr,
                        retention_top1,
                        retention_mrr,
                    })
                })();
                *results[i].lock().expect("sweep result lock poisoned") = Some(result);
            });
        }
    });

    let mut rows = Vec::with_capacity(parsed.len());
    for cell in results {
        let slot = cell.into_inner().expect("sweep result lock poisoned");
        rows.push(slot.expect("every sweep job was claimed")?);
    }

    let mut csv = String::from("axis,value,final_avg_top1,final_avg_mrr,retention_top1,retention_mrr\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            axis.tag(),
            row.value,
            fmt_opt(row.final_avg_top1),
            fmt_opt(row.final_avg_mrr),
            row.retention_top1,
            row.retention_mrr
        ));
    }
    let path = out.join("summary.csv");
    std::fs::write(&path, &csv)
        .map_err(|e| Error::io_context(format!("cannot write '{}'", path.display()), e))?;
    let summary = SweepSummary {
        version: BUILD_VERSION.to_string(),
        axis: axis.tag().to_string(),
        rows,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Structural(format!("summary serialization failed: {e}")))?;
    let jpath = out.join("summary.json");
    std::fs::write(&jpath, json + "\n")
        .map_err(|e| Error::io_context(format!("cannot write '{}'", jpath.display()), e))?;

    print!("{csv}");
    println!("summary in {}", out.display());
    Ok(())
}
