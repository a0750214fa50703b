//! Sequential-injection orchestration: run state, task contexts, the
//! instrumented train-sample loader, pre-training, the per-task training
//! loop, checkpointing and the end-to-end experiment driver.
//!
//! A run proceeds in numbered global stages. With a schedule of `T` tasks,
//! stages `1..=T` are the first injection round; enabling the second round
//! replays the same tasks as stages `T+1..=2T` starting from the round-one
//! final student, without resetting anything.

mod checkpoint;
mod driver;
mod logging;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedRun, CHECKPOINT_FORMAT_VERSION};
pub use driver::{evaluate_checkpoint, evaluate_run, run_experiment, write_report, RunOutput};
pub use logging::{LogRecord, MaskStats, RunLog};
pub use train::{pretrain_common, train_task, PretrainSummary, TaskSummary};

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synthworld::{Benchmark, ConceptRecord, VisualSample};
use crate::textmodel::branch::{TeacherBranch, TextBranchState};
use crate::textmodel::tokenizer::tokenize;
use crate::util::derive_rng;

/// Counts every train-split fetch and flags reads that touch a task other
/// than the one currently being trained. A clean run finishes with zero
/// violations; the count is surfaced in the final report.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DataAudit {
    active_task: Option<usize>,
    train_reads: u64,
    violations: u64,
}

impl DataAudit {
    pub fn begin_task(&mut self, task: usize) {
        self.active_task = Some(task);
    }

    pub fn end_task(&mut self) {
        self.active_task = None;
    }

    pub fn record_train_read(&mut self, task_of_sample: usize) {
        self.train_reads += 1;
        if self.active_task != Some(task_of_sample) {
            self.violations += 1;
        }
    }

    pub fn train_reads(&self) -> u64 {
        self.train_reads
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }
}

/// The only sanctioned path to train-split samples. Every fetch is recorded
/// against the audit, so out-of-task reads are visible rather than silent.
pub struct TrainLoader<'a> {
    benchmark: &'a Benchmark,
    audit: &'a mut DataAudit,
}

impl<'a> TrainLoader<'a> {
    pub fn new(benchmark: &'a Benchmark, audit: &'a mut DataAudit) -> Self {
        Self { benchmark, audit }
    }

    /// Number of train samples for a task (metadata, not a sample read).
    pub fn len(&self, task: usize) -> Result<usize> {
        Ok(self.benchmark.task(task)?.train.len())
    }

    pub fn is_empty(&self, task: usize) -> Result<bool> {
        Ok(self.len(task)? == 0)
    }

    pub fn get(&mut self, task: usize, index: usize) -> Result<&'a VisualSample> {
        let spec = self.benchmark.task(task)?;
        let sample = spec.train.get(index).ok_or_else(|| {
            Error::Structural(format!(
                "task {task} has {} train samples, index {index} out of range",
                spec.train.len()
            ))
        })?;
        self.audit.record_train_read(task);
        Ok(sample)
    }
}

/// Everything that evolves over a run: the student, the concept stores, and
/// progress bookkeeping. The benchmark itself is owned but never mutated.
#[derive(Debug)]
pub struct RunState {
    pub student: TextBranchState,
    pub benchmark: Benchmark,
    /// Names of injected concepts in injection order; append-only.
    pub historical: Vec<String>,
    /// Completed global stages (0 = nothing trained yet).
    pub stages_completed: usize,
    pub run_seed: u64,
    pub audit: DataAudit,
}

impl RunState {
    /// Fresh run: seeded student init, compatibility-checked benchmark.
    pub fn new(config: &RunConfig, benchmark: Benchmark) -> Result<Self> {
        config.validate()?;
        benchmark.validate()?;
        check_model_compat(config, &benchmark)?;
        let mut rng = derive_rng(config.seeds.run, "init");
        let student = TextBranchState::init(
            config.model.dims(),
            config.model.k_trainable,
            config.model.projector_trainable,
            &mut rng,
        )?;
        Ok(Self {
            student,
            benchmark,
            historical: Vec::new(),
            stages_completed: 0,
            run_seed: config.seeds.run,
            audit: DataAudit::default(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.benchmark.tasks.len()
    }

    /// Stage number the next `begin_task` will open.
    pub fn next_stage(&self) -> usize {
        self.stages_completed + 1
    }

    /// Round / within-round task the next stage belongs to (both 1-based).
    pub fn next_position(&self) -> (usize, usize) {
        let t = self.task_count();
        (self.stages_completed / t + 1, self.stages_completed % t + 1)
    }

    /// Tasks whose concepts have been injected so far, ascending.
    pub fn injected_tasks(&self) -> Vec<usize> {
        let t = self.task_count();
        (1..=self.stages_completed.min(t)).collect()
    }

    /// Resolve the historical names to their concept records, in order.
    pub fn historical_records(&self) -> Result<Vec<ConceptRecord>> {
        let by_name: BTreeMap<&str, &ConceptRecord> = self
            .benchmark
            .concepts()
            .map(|c| (c.name.as_str(), c))
            .collect();
        self.historical
            .iter()
            .map(|name| {
                by_name
                    .get(name.as_str())
                    .map(|&c| c.clone())
                    .ok_or_else(|| {
                        Error::Structural(format!(
                            "historical concept '{name}' is not in the benchmark"
                        ))
                    })
            })
            .collect()
    }
}

/// Reject benchmarks generated against a different text-model shape: the
/// stored token sequences must be exactly what this model's tokenizer
/// produces, and feature width must match the projector output.
fn check_model_compat(config: &RunConfig, benchmark: &Benchmark) -> Result<()> {
    let m = &config.model;
    if benchmark.config != config.benchmark
        || benchmark.seed != config.seeds.benchmark
        || benchmark.common_seed != config.seeds.common_seed()
    {
        return Err(Error::Config(
            "benchmark was generated from different world parameters or seeds than this \
             config declares; regenerate it or fix the config"
                .to_string(),
        ));
    }
    if benchmark.d_v != m.d_v {
        return Err(Error::Config(format!(
            "benchmark features have {} dims, model.d_v is {}; regenerate the benchmark",
            benchmark.d_v, m.d_v
        )));
    }
    for c in benchmark.concepts() {
        let expect = tokenize(&c.name, m.v_tok, m.max_tokens)?;
        if expect != c.tokens {
            return Err(Error::Config(format!(
                "benchmark tokens for '{}' disagree with model.v_tok/max_tokens; \
                 regenerate the benchmark",
                c.name
            )));
        }
    }
    Ok(())
}

/// Per-task working set: the frozen teacher plus the old/novel concept
/// split. Built once at task start and immutable afterwards.
#[derive(Debug)]
pub struct TaskContext {
    /// Global stage number this context trains.
    pub stage: usize,
    pub round: usize,
    pub task_index: usize,
    pub teacher: TeacherBranch,
    /// C_old: common anchors then historical concepts, minus any concept
    /// that is novel again this stage (replay rounds).
    pub old_concepts: Vec<ConceptRecord>,
    pub novel_concepts: Vec<ConceptRecord>,
}

/// Open stage `t`: snapshot the teacher from the current student and
/// assemble the old/novel concept sets. `t` must be the next task in the
/// schedule order (possibly in a later round); anything else is a protocol
/// error. Does not mutate the run — progress advances when training ends.
pub fn begin_task(run: &RunState, t: usize, config: &RunConfig) -> Result<TaskContext> {
    let (round, expected) = run.next_position();
    if t != expected {
        return Err(Error::Protocol(format!(
            "tasks are strictly sequential: expected task {expected} (stage {}, round {round}), \
             got task {t}",
            run.next_stage()
        )));
    }
    let stage = run.next_stage();
    let teacher = run.student.snapshot_teacher();

    let novel_concepts = run.benchmark.task(t)?.concepts.clone();
    let novel_names: BTreeSet<&str> = novel_concepts.iter().map(|c| c.name.as_str()).collect();

    let commons: Vec<ConceptRecord> = match config.training.resample_common_anchors {
        None => run.benchmark.common_pool.clone(),
        Some(n) => {
            let pool = &run.benchmark.common_pool;
            if n == 0 || n > pool.len() {
                return Err(Error::Config(format!(
                    "resample_common_anchors = {n} must lie in 1..={}",
                    pool.len()
                )));
            }
            let mut rng = derive_rng(run.run_seed, &format!("stage{stage}:common-anchors"));
            let mut chosen = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| pool[i].clone()).collect()
        }
    };

    let mut old_concepts = commons;
    for record in run.historical_records()? {
        // In a replay round the current task's concepts are novel again;
        // they must not sit on both sides of the objective.
        if !novel_names.contains(record.name.as_str()) {
            old_concepts.push(record);
        }
    }
    debug_assert!(old_concepts
        .iter()
        .all(|c| !novel_names.contains(c.name.as_str())));

    Ok(TaskContext {
        stage,
        round,
        task_index: t,
        teacher,
        old_concepts,
        novel_concepts,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::config::{ModelConfig, PretrainConfig, SeedConfig, TrainingConfig};
    use crate::synthworld::{generate_benchmark, WorldConfig};

    /// Small-but-real configuration used across the continual test suite:
    /// 2 tasks x 2 concepts, 5 common concepts, 3-layer model.
    pub fn tiny_config() -> RunConfig {
        RunConfig {
            benchmark: WorldConfig {
                schedule: vec![2, 2],
                common_size: 5,
                per_concept_train: 4,
                per_concept_test: 3,
                sigma: 0.2,
                k_primitives: 6,
                s_sparsity: 2,
            },
            model: ModelConfig {
                v_tok: 211,
                d: 8,
                l_layers: 3,
                d_v: 8,
                max_tokens: 6,
                k_trainable: 2,
                projector_trainable: true,
            },
            training: TrainingConfig {
                epochs: 2,
                lr: 1e-2,
                lr_decay_epochs: vec![2],
                lr_decay_factor: 0.1,
                batch_size: 4,
                tau_c: 0.1,
                smooth_l1_beta: 1.0,
                weight_decay: 1e-4,
                r_update_ratio: 0.5,
                mask_refresh_interval: 1,
                kpd_enabled: true,
                rssd_enabled: true,
                second_round: false,
                resample_common_anchors: None,
                pretrain: PretrainConfig {
                    enabled: true,
                    target_accuracy: 0.9,
                    floor_accuracy: 0.05,
                    max_steps: 800,
                    check_interval: 20,
                    samples_per_concept: 6,
                },
            },
            seeds: SeedConfig {
                benchmark: 5,
                run: 11,
                common: None,
            },
            output_dir: None,
        }
    }

    pub fn tiny_benchmark(config: &RunConfig) -> Benchmark {
        generate_benchmark(
            &config.benchmark,
            config.model.d_v,
            config.model.v_tok,
            config.model.max_tokens,
            config.seeds.benchmark,
            config.seeds.common_seed(),
        )
        .unwrap()
    }
}
