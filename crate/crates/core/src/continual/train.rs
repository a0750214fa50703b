//! Pre-training on the common pool and the per-task training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::diffcore::adamw::{adamw_step, AdamWConfig, OptimizerState};
use crate::diffcore::graph::{evaluate, ComponentSet, EvalRequest, ModelInputs, Region, TeacherCache};
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::kpd::{apply_mask, build_mask, MaskState};
use crate::synthworld::{sample_region_features, Split, VisualSample};
use crate::textmodel::tokenizer::TokenSeq;
use crate::util::derive_rng;

use super::logging::{LogRecord, MaskStats, RunLog};
use super::{RunState, TaskContext, TrainLoader};

/// Learning rate for a 0-based epoch index: the base rate times one decay
/// factor per schedule entry the epoch has reached.
pub(crate) fn lr_for_epoch(base: f64, factor: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let hits = decay_epochs.iter().filter(|&&d| epoch >= d).count();
    base * factor.powi(hits as i32)
}

fn adamw_base(config: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        lr: config.training.lr,
        weight_decay: config.training.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Numeric failures get the exact training position attached; other error
/// kinds pass through untouched.
fn tag_numeric(stage: Option<usize>, epoch: usize, step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(msg) => Error::Numeric(match stage {
            Some(s) => format!("stage {s}, epoch {epoch}, step {step}: {msg}"),
            None => format!("pre-training epoch {epoch}, step {step}: {msg}"),
        }),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainSummary {
    pub steps: u64,
    pub top1: f64,
    pub target_reached: bool,
}

/// Align the text branch to the common pool before any injection: train the
/// whole encoder stack plus projector with the contrastive loss alone on
/// ephemeral noisy samples of the common prototypes, until common-pool
/// top-1 accuracy reaches the target or the step cap runs out. Restores the
/// injection parameter partition before returning.
pub fn pretrain_common(
    run: &mut RunState,
    config: &RunConfig,
    log: &mut RunLog,
) -> Result<PretrainSummary> {
    if run.stages_completed != 0 || !run.historical.is_empty() {
        return Err(Error::Protocol(
            "pre-training requires a fresh student (no completed stages)".to_string(),
        ));
    }
    let p = &config.training.pretrain;
    let dims = run.student.dims;
    run.student.partition_parameters(dims.l_layers, true)?;

    // Ephemeral train samples: drawn from the run seed, never stored in the
    // benchmark, so benchmark bytes stay independent of training.
    let sigma = run.benchmark.config.sigma;
    let candidates: Vec<TokenSeq> = run
        .benchmark
        .common_pool
        .iter()
        .map(|c| c.tokens.clone())
        .collect();
    let mut samples: Vec<VisualSample> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, c) in run.benchmark.common_pool.iter().enumerate() {
        let drawn =
            sample_region_features(c, p.samples_per_concept, sigma, Split::Train, run.run_seed)?;
        labels.extend(std::iter::repeat(i).take(drawn.len()));
        samples.extend(drawn);
    }

    let hyper = adamw_base(config);
    let mut opt = OptimizerState::new(&run.student.params);
    let mut step: u64 = 0;
    let mut top1 = 0.0;
    let mut target_reached = false;

    'outer: for epoch in 0usize.. {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut derive_rng(run.run_seed, &format!("pretrain:epoch{epoch}")));
        for batch in order.chunks(config.training.batch_size) {
            step += 1;
            let regions: Vec<Region> = batch
                .iter()
                .map(|&i| Region {
                    feature: &samples[i].feature,
                    label: labels[i],
                })
                .collect();
            let inputs = ModelInputs {
                dims,
                candidates: &candidates,
                old: &[],
                regions: &regions,
                teacher: None,
                tau_c: config.training.tau_c,
                beta: config.training.smooth_l1_beta,
            };
            let req = EvalRequest {
                components: ComponentSet {
                    con: true,
                    ..ComponentSet::default()
                },
                task_grads: true,
                probe_grads: false,
            };
            let tag = tag_numeric(None, epoch, step);
            let out = evaluate(&inputs, &run.student.params, &req).map_err(&tag)?;
            let grads = out.task_grads.expect("task gradients requested");
            adamw_step(&mut run.student.params, &grads, &mut opt, &hyper, None).map_err(&tag)?;
            run.student.params.check_finite("pre-training step").map_err(&tag)?;

            if step % p.check_interval == 0 || step >= p.max_steps {
                top1 = Evaluator::new(&run.benchmark)
                    .ovd_retention(&run.student, 0)?
                    .top1;
                log.record(&LogRecord::PretrainCheck { step, top1 })?;
                if top1 >= p.target_accuracy {
                    target_reached = true;
                    break 'outer;
                }
                if step >= p.max_steps {
                    break 'outer;
                }
            }
        }
    }

    if top1 < p.floor_accuracy {
        return Err(Error::Config(format!(
            "pre-training reached only {top1:.3} common-pool top-1 after {step} steps \
             (floor {}); the world looks unseparable — check sigma, k_primitives and \
             common_size",
            p.floor_accuracy
        )));
    }
    run.student
        .partition_parameters(config.model.k_trainable, config.model.projector_trainable)?;
    log.record(&LogRecord::PretrainDone {
        steps: step,
        top1,
        target_reached,
    })?;
    Ok(PretrainSummary {
        steps: step,
        top1,
        target_reached,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSummary {
    pub stage: usize,
    pub round: usize,
    pub task_index: usize,
    pub steps: u64,
    pub teacher_checksum: u64,
}

/// Train one task to completion: the full epoch loop with the joint
/// objective, probe-driven mask refreshes, and masked optimizer steps.
/// Advances the run's stage counter and appends the task's concepts to the
/// historical store (first injection only).
pub fn train_task(
    run: &mut RunState,
    ctx: &TaskContext,
    config: &RunConfig,
    log: &mut RunLog,
) -> Result<TaskSummary> {
    if ctx.stage != run.next_stage() {
        return Err(Error::Protocol(format!(
            "stale task context: it opens stage {}, run is at stage {}",
            ctx.stage,
            run.next_stage()
        )));
    }
    let tr = &config.training;
    let dims = run.student.dims;
    let n_old = ctx.old_concepts.len();

    let candidates: Vec<TokenSeq> = ctx
        .old_concepts
        .iter()
        .chain(ctx.novel_concepts.iter())
        .map(|c| c.tokens.clone())
        .collect();
    let old_idx: Vec<usize> = (0..n_old).collect();
    let label_of: HashMap<&str, usize> = ctx
        .novel_concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), n_old + i))
        .collect();

    let need_teacher = tr.rssd_enabled || tr.kpd_enabled;
    let cache = if need_teacher {
        Some(TeacherCache::build(ctx.teacher.state(), &candidates[..n_old])?)
    } else {
        None
    };

    log.record(&LogRecord::TaskStart {
        stage: ctx.stage,
        round: ctx.round,
        task: ctx.task_index,
        teacher_checksum: ctx.teacher.checksum(),
        n_old,
        n_novel: ctx.novel_concepts.len(),
    })?;

    let RunState {
        student,
        benchmark,
        historical,
        stages_completed,
        run_seed,
        audit,
    } = run;
    audit.begin_task(ctx.task_index);
    let mut loader = TrainLoader::new(benchmark, audit);
    let n_train = loader.len(ctx.task_index)?;

    let base_hyper = adamw_base(config);
    let mut opt = OptimizerState::new(&student.params);
    let mut mask: Option<MaskState> = None;
    let mut step: u64 = 0;

    for epoch in 0..tr.epochs {
        let lr = lr_for_epoch(tr.lr, tr.lr_decay_factor, &tr.lr_decay_epochs, epoch);
        let hyper = AdamWConfig { lr, ..base_hyper };
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut derive_rng(
            *run_seed,
            &format!("stage{}:epoch{epoch}:shuffle", ctx.stage),
        ));
        for batch in order.chunks(tr.batch_size) {
            step += 1;
            let tag = tag_numeric(Some(ctx.stage), epoch, step);
            let mut regions: Vec<Region> = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = loader.get(ctx.task_index, i)?;
                let label = *label_of.get(sample.label.as_str()).ok_or_else(|| {
                    Error::Structural(format!(
                        "train sample labeled '{}' is not a task-{} concept",
                        sample.label, ctx.task_index
                    ))
                })?;
                regions.push(Region {
                    feature: &sample.feature,
                    label,
                });
            }

            let refresh_due = tr.kpd_enabled && (step - 1) % tr.mask_refresh_interval == 0;
            let inputs = ModelInputs {
                dims,
                candidates: &candidates,
                old: &old_idx,
                regions: &regions,
                teacher: cache.as_ref(),
                tau_c: tr.tau_c,
                beta: tr.smooth_l1_beta,
            };
            let req = EvalRequest {
                components: ComponentSet::task(tr.rssd_enabled),
                task_grads: true,
                probe_grads: refresh_due,
            };
            let out = evaluate(&inputs, &student.params, &req).map_err(&tag)?;

            let mut probe_max_abs = None;
            if refresh_due {
                let probe = out.probe_grads.expect("probe gradients requested");
                probe_max_abs = Some(
                    probe
                        .iter()
                        .flat_map(|(_, g)| g.iter())
                        .fold(0.0f64, |m, &g| m.max(g.abs())),
                );
                mask = Some(build_mask(&student.params, &probe, tr.r_update_ratio, step)?);
            }

            let mut grads = out.task_grads.expect("task gradients requested");
            if let Some(ms) = &mask {
                apply_mask(&mut grads, ms)?;
            }
            adamw_step(&mut student.params, &grads, &mut opt, &hyper, mask.as_ref())
                .map_err(&tag)?;
            student
                .params
                .check_finite("post-update parameters")
                .map_err(&tag)?;

            log.record(&LogRecord::Step {
                stage: ctx.stage,
                epoch,
                step,
                lr,
                losses: out.breakdown,
                probe_max_abs,
                mask: mask.as_ref().map(|ms| MaskStats {
                    tau: ms.threshold(),
                    retained: ms.retained(),
                    total: ms.total(),
                    retained_fraction: ms.retained_fraction(),
                }),
            })?;
        }
    }
    audit.end_task();

    // The teacher must not have drifted while it anchored this task.
    ctx.teacher.verify()?;

    for c in &ctx.novel_concepts {
        if !historical.iter().any(|n| n == &c.name) {
            historical.push(c.name.clone());
        }
    }
    *stages_completed += 1;

    log.record(&LogRecord::TaskEnd {
        stage: ctx.stage,
        steps: step,
        historical_len: historical.len(),
    })?;
    Ok(TaskSummary {
        stage: ctx.stage,
        round: ctx.round,
        task_index: ctx.task_index,
        steps: step,
        teacher_checksum: ctx.teacher.checksum(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{begin_task, RunState};
    use super::*;
    use crate::losses::rssd_loss;

    #[test]
    fn lr_schedule_applies_decay_cumulatively() {
        let decay = [11, 20];
        assert_eq!(lr_for_epoch(1e-3, 0.1, &decay, 0), 1e-3);
        assert_eq!(lr_for_epoch(1e-3, 0.1, &decay, 10), 1e-3);
        assert!((lr_for_epoch(1e-3, 0.1, &decay, 11) - 1e-4).abs() < 1e-19);
        assert!((lr_for_epoch(1e-3, 0.1, &decay, 19) - 1e-4).abs() < 1e-19);
        assert!((lr_for_epoch(1e-3, 0.1, &decay, 20) - 1e-5).abs() < 1e-20);
        assert!((lr_for_epoch(1e-3, 0.1, &decay, 23) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn pretrain_reaches_target_and_restores_partition() {
        let config = tiny_config();
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let mut log = RunLog::disabled();
        let summary = pretrain_common(&mut run, &config, &mut log).unwrap();
        assert!(summary.top1 >= config.training.pretrain.floor_accuracy);
        assert_eq!(run.student.k_trainable(), config.model.k_trainable);
        assert_eq!(
            run.student.projector_trainable(),
            config.model.projector_trainable
        );
        // the whole branch trained: frozen layers moved vs. a fresh init
        let fresh = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        assert_ne!(
            run.student.params.frozen_checksum(),
            fresh.student.params.frozen_checksum()
        );
    }

    #[test]
    fn pretrain_is_deterministic() {
        let config = tiny_config();
        let mut log = RunLog::disabled();
        let mut a = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        pretrain_common(&mut a, &config, &mut log).unwrap();
        let mut b = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        pretrain_common(&mut b, &config, &mut log).unwrap();
        assert_eq!(a.student.params.checksum(), b.student.params.checksum());
    }

    #[test]
    fn noiseless_world_pretrains_to_perfect_accuracy() {
        let mut config = tiny_config();
        config.benchmark.sigma = 0.0;
        config.training.pretrain.target_accuracy = 1.0;
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let summary = pretrain_common(&mut run, &config, &mut RunLog::disabled()).unwrap();
        assert_eq!(summary.top1, 1.0);
        assert!(summary.target_reached);
    }

    #[test]
    fn pretrain_rejects_used_run() {
        let config = tiny_config();
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        run.stages_completed = 1;
        let err = pretrain_common(&mut run, &config, &mut RunLog::disabled()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn rssd_loss_vanishes_right_after_task_start() {
        let config = tiny_config();
        let run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let ctx = begin_task(&run, 1, &config).unwrap();
        let b = rssd_loss(&run.student, &ctx.teacher, &ctx.old_concepts, 1.0).unwrap();
        assert_eq!(b.l_rssd, 0.0);
    }

    #[test]
    fn train_task_advances_state_and_appends_history() {
        let config = tiny_config();
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let mut log = RunLog::disabled();
        pretrain_common(&mut run, &config, &mut log).unwrap();

        let ctx = begin_task(&run, 1, &config).unwrap();
        let before = ctx.teacher.checksum();
        let summary = train_task(&mut run, &ctx, &config, &mut log).unwrap();
        assert_eq!(summary.stage, 1);
        // 2 concepts x 4 train samples, batch 4 -> 2 steps/epoch x 2 epochs
        assert_eq!(summary.steps, 4);
        assert_eq!(run.stages_completed, 1);
        assert_eq!(
            run.historical,
            vec!["task1_concept0".to_string(), "task1_concept1".to_string()]
        );
        assert_eq!(run.audit.violations(), 0);
        assert_eq!(run.audit.train_reads(), 16);

        // teacher unchanged through training; next task snapshots a new one
        assert_eq!(summary.teacher_checksum, before);
        let ctx2 = begin_task(&run, 2, &config).unwrap();
        assert_ne!(ctx2.teacher.checksum(), before);

        // reusing the consumed context is a protocol error
        let err = train_task(&mut run, &ctx, &config, &mut log).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));

        train_task(&mut run, &ctx2, &config, &mut log).unwrap();
        assert_eq!(run.historical.len(), 4);
        assert_eq!(run.stages_completed, 2);
    }

    #[test]
    fn replay_round_does_not_duplicate_history() {
        let mut config = tiny_config();
        config.training.epochs = 1;
        config.training.pretrain.enabled = false;
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let mut log = RunLog::disabled();
        for round in 0..2 {
            for t in 1..=2 {
                let ctx = begin_task(&run, t, &config).unwrap();
                assert_eq!(ctx.round, round + 1);
                train_task(&mut run, &ctx, &config, &mut log).unwrap();
            }
        }
        assert_eq!(run.stages_completed, 4);
        assert_eq!(run.historical.len(), 4); // no duplicates appended
        let unique: std::collections::BTreeSet<&String> = run.historical.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn poisoned_parameters_abort_with_step_tag() {
        let config = tiny_config();
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let ctx = begin_task(&run, 1, &config).unwrap();
        run.student
            .params
            .get_mut("projector.bias")
            .unwrap()
            .values[0] = f64::NAN;
        let err = train_task(&mut run, &ctx, &config, &mut RunLog::disabled()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let msg = err.to_string();
        assert!(msg.contains("stage 1"), "missing step tag: {msg}");
        assert!(msg.contains("step 1"), "missing step tag: {msg}");
    }

    #[test]
    fn feature_flags_gate_the_objective() {
        // naive fine-tuning must not touch the teacher at all; rssd-only and
        // rssd+kpd run the full objective paths.
        let mut config = tiny_config();
        config.training.epochs = 1;
        config.training.kpd_enabled = false;
        config.training.rssd_enabled = false;
        let mut run = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let ctx = begin_task(&run, 1, &config).unwrap();
        train_task(&mut run, &ctx, &config, &mut RunLog::disabled()).unwrap();
        assert_eq!(run.stages_completed, 1);

        config.training.rssd_enabled = true;
        config.training.kpd_enabled = true;
        let mut run2 = RunState::new(&config, tiny_benchmark(&config)).unwrap();
        let ctx2 = begin_task(&run2, 1, &config).unwrap();
        train_task(&mut run2, &ctx2, &config, &mut RunLog::disabled()).unwrap();
        // different objectives must move the student differently
        assert_ne!(run.student.params.checksum(), run2.student.params.checksum());
    }
}
