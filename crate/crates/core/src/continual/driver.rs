//! End-to-end experiment driver: pre-train, run every stage, evaluate after
//! each one, and emit the artifact set (log, checkpoints, report).

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{final_average, Evaluator, MetricsReport, METRIC_NOTE};
use crate::synthworld::Benchmark;
use crate::util::BUILD_VERSION;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::logging::{LogRecord, RunLog};
use super::train::{pretrain_common, train_task, PretrainSummary};
use super::{begin_task, RunState};

/// A finished experiment: the full-matrix report plus phase summaries.
pub struct RunOutput {
    pub report: MetricsReport,
    pub pretrain: Option<PretrainSummary>,
    pub run: RunState,
}

fn assemble_report(
    run: &RunState,
    config: &RunConfig,
    cells: Vec<crate::eval::CellScore>,
    final_stage: usize,
) -> Result<MetricsReport> {
    let fa = final_average(&cells, final_stage);
    Ok(MetricsReport {
        metric_note: METRIC_NOTE.to_string(),
        version: BUILD_VERSION.to_string(),
        benchmark_checksum: run.benchmark.checksum()?,
        config: config.echo()?,
        stages_completed: run.stages_completed,
        audit_violations: run.audit.violations(),
        cells,
        final_avg_top1: fa.map(|(t, _)| t),
        final_avg_mrr: fa.map(|(_, m)| m),
    })
}

/// Write `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Structural(format!("report serialization failed: {e}")))?;
    let path = dir.join("report.json");
    std::fs::write(&path, json + "\n")
        .map_err(|e| Error::io_context(format!("cannot write '{}'", path.display()), e))?;
    let path = dir.join("report.csv");
    std::fs::write(&path, report.to_csv())
        .map_err(|e| Error::io_context(format!("cannot write '{}'", path.display()), e))?;
    Ok(())
}

/// Run the whole protocol on a fresh student: optional pre-training, one or
/// two rounds over the schedule with per-stage evaluation, artifact
/// emission when an output directory is given.
pub fn run_experiment(
    config: &RunConfig,
    benchmark: Benchmark,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| {
            Error::io_context(format!("cannot create output dir '{}'", dir.display()), e)
        })?;
    }
    let mut log = match out_dir {
        Some(dir) => RunLog::to_file(&dir.join("log.ndjson"))?,
        None => RunLog::disabled(),
    };

    let mut run = RunState::new(config, benchmark)?;
    log.record(&LogRecord::RunStart {
        version: BUILD_VERSION.to_string(),
        benchmark_checksum: run.benchmark.checksum()?,
        benchmark_seed: config.seeds.benchmark,
        common_seed: config.seeds.common_seed(),
        run_seed: config.seeds.run,
    })?;

    let pretrain = if config.training.pretrain.enabled {
        Some(pretrain_common(&mut run, config, &mut log)?)
    } else {
        None
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&run, config, &dir.join("checkpoint_pretrain.json"))?;
    }

    let rounds = if config.training.second_round { 2 } else { 1 };
    let t_total = run.task_count();
    let mut cells = Vec::new();
    for _ in 0..rounds {
        for t in 1..=t_total {
            let ctx = begin_task(&run, t, config)?;
            train_task(&mut run, &ctx, config, &mut log)?;
            let stage = run.stages_completed;
            let injected = run.injected_tasks();
            let evaluator = Evaluator::new(&run.benchmark);
            cells.extend(evaluator.stage_scores(&run.student, stage, t, &injected)?);
        }
    }
    log.flush()?;

    let report = assemble_report(&run, config, cells, run.stages_completed)?;
    if let Some(dir) = out_dir {
        save_checkpoint(&run, config, &dir.join("checkpoint_final.json"))?;
        write_report(&report, dir)?;
    }
    Ok(RunOutput {
        report,
        pretrain,
        run,
    })
}

/// Score a run state as it stands: the current stage's full evaluation row
/// (just the retention cell for a pre-injection state).
pub fn evaluate_run(run: &RunState, config: &RunConfig) -> Result<MetricsReport> {
    let evaluator = Evaluator::new(&run.benchmark);
    let stage = run.stages_completed;
    let cells = if stage == 0 {
        vec![evaluator.ovd_retention(&run.student, 0)?]
    } else {
        let t_total = run.task_count();
        let current = (stage - 1) % t_total + 1;
        evaluator.stage_scores(&run.student, stage, current, &run.injected_tasks())?
    };
    assemble_report(run, config, cells, stage)
}

/// Re-evaluate a saved checkpoint against its benchmark; equal to direct
/// evaluation of the state that was saved.
pub fn evaluate_checkpoint(path: &Path, benchmark: Benchmark) -> Result<MetricsReport> {
    let loaded = load_checkpoint(path, benchmark)?;
    evaluate_run(&loaded.run, &loaded.config)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::eval::ProtocolKind;

    #[test]
    fn tiny_run_produces_full_matrix() {
        let config = tiny_config();
        let out = run_experiment(&config, tiny_benchmark(&config), None).unwrap();
        let report = &out.report;
        assert_eq!(report.stages_completed, 2);
        assert_eq!(report.audit_violations, 0);
        // stage 1: common + task1; stage 2: common + task1 + task2
        assert_eq!(report.cells.len(), 5);
        let tags: Vec<(usize, &str)> = report
            .cells
            .iter()
            .map(|c| (c.stage, c.test_set.as_str()))
            .collect();
        assert_eq!(
            tags,
            vec![
                (1, "common"),
                (1, "task1"),
                (2, "common"),
                (2, "task1"),
                (2, "task2"),
            ]
        );
        assert_eq!(report.cells[1].protocol, ProtocolKind::Acquisition);
        assert_eq!(report.cells[3].protocol, ProtocolKind::Historical);
        assert!(report.final_avg_top1.is_some());
        assert!(out.pretrain.unwrap().top1 > 0.0);
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let config = tiny_config();
        let a = run_experiment(&config, tiny_benchmark(&config), None).unwrap();
        let b = run_experiment(&config, tiny_benchmark(&config), None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }

    #[test]
    fn second_round_extends_the_matrix() {
        let mut config = tiny_config();
        config.training.second_round = true;
        config.training.epochs = 1;
        let out = run_experiment(&config, tiny_benchmark(&config), None).unwrap();
        assert_eq!(out.report.stages_completed, 4);
        // 2 + 3 + 3 + 3 cells
        assert_eq!(out.report.cells.len(), 11);
        let last: Vec<&str> = out
            .report
            .cells
            .iter()
            .filter(|c| c.stage == 4)
            .map(|c| c.test_set.as_str())
            .collect();
        assert_eq!(last, vec!["common", "task1", "task2"]);
        assert_eq!(out.run.historical.len(), 4);
    }

    #[test]
    fn artifacts_are_written_and_consistent() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&config, tiny_benchmark(&config), Some(dir.path())).unwrap();
        for name in [
            "log.ndjson",
            "checkpoint_pretrain.json",
            "checkpoint_final.json",
            "report.json",
            "report.csv",
        ] {
            let p = dir.path().join(name);
            assert!(p.is_file(), "missing {name}");
            assert!(p.metadata().unwrap().len() > 0, "empty {name}");
        }
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(
            serde_json::to_string(&parsed).unwrap(),
            serde_json::to_string(&out.report).unwrap()
        );
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), out.report.cells.len() + 1);

        let log = std::fs::read_to_string(dir.path().join("log.ndjson")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["record"], "run_start");
        let masked = log
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["record"] == "step")
            .all(|v| v.get("mask").is_some());
        assert!(masked, "kpd run must log mask stats on every step");
    }

    #[test]
    fn checkpoint_eval_matches_direct_eval() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&config, tiny_benchmark(&config), Some(dir.path())).unwrap();
        let direct = evaluate_run(&out.run, &config).unwrap();
        let from_ck = evaluate_checkpoint(
            &dir.path().join("checkpoint_final.json"),
            tiny_benchmark(&config),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&direct).unwrap(),
            serde_json::to_string(&from_ck).unwrap()
        );
        // pretrain checkpoint: retention only, no final average
        let pre = evaluate_checkpoint(
            &dir.path().join("checkpoint_pretrain.json"),
            tiny_benchmark(&config),
        )
        .unwrap();
        assert_eq!(pre.cells.len(), 1);
        assert_eq!(pre.cells[0].protocol, ProtocolKind::OvdRetention);
        assert!(pre.final_avg_top1.is_none());
    }
}
