//! Three-way evaluation over the frozen benchmark: retention on the common
//! pool, acquisition on a task's own test set, and historical accuracy on
//! earlier tasks. A region is classified by ranking candidate concepts by
//! cosine similarity between its visual feature and each concept's projected
//! text embedding; ties break lexicographically by concept name so rankings
//! are fully deterministic.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::synthworld::{Benchmark, ConceptRecord, VisualSample};
use crate::textmodel::branch::TextBranchState;

/// Fixed number of common concepts mixed into novel-task candidate sets.
pub const DISTRACTOR_COUNT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Common test samples classified against the whole common pool.
    OvdRetention,
    /// The newest task's test samples against its concepts plus distractors.
    Acquisition,
    /// An earlier task's test samples against its concepts plus distractors.
    Historical,
}

impl ProtocolKind {
    pub fn tag(self) -> &'static str {
        match self {
            ProtocolKind::OvdRetention => "ovd_retention",
            ProtocolKind::Acquisition => "acquisition",
            ProtocolKind::Historical => "historical",
        }
    }
}

/// One cell of the stage-by-test-set matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    /// Global stage number, 1-based; continues past the schedule length when
    /// the schedule is replayed.
    pub stage: usize,
    /// "common" or "task{k}".
    pub test_set: String,
    pub protocol: ProtocolKind,
    pub top1: f64,
    pub mrr: f64,
    pub n_samples: usize,
    pub n_candidates: usize,
}

/// Candidate concepts with their projected text embeddings, computed once
/// per cell so ranking cost does not repeat the forward pass per sample.
struct EmbeddedCandidates {
    names: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl EmbeddedCandidates {
    fn build(branch: &TextBranchState, candidates: &[&ConceptRecord]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Structural(
                "classification requires at least one candidate concept".to_string(),
            ));
        }
        let mut seen = BTreeSet::new();
        for c in candidates {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Structural(format!(
                    "duplicate candidate concept '{}' in classification set",
                    c.name
                )));
            }
        }
        let mut names = Vec::with_capacity(candidates.len());
        let mut embeddings = Vec::with_capacity(candidates.len());
        for c in candidates {
            let (_, p) = branch.encode_project(&c.tokens)?;
            names.push(c.name.clone());
            embeddings.push(p);
        }
        Ok(Self { names, embeddings })
    }

    /// Candidate indices ordered by descending cosine score, lexicographic
    /// name ascending on exact ties.
    fn rank(&self, feature: &[f64]) -> Result<Vec<(usize, f64)>> {
        let mut scored = Vec::with_capacity(self.names.len());
        for (i, p) in self.embeddings.iter().enumerate() {
            scored.push((i, cosine(feature, p)?));
        }
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.names[a.0].cmp(&self.names[b.0]))
        });
        Ok(scored)
    }
}

/// Rank `candidates` for one region feature. Returns (name, score) pairs in
/// descending score order with deterministic tie-breaks.
pub fn classify_region(
    branch: &TextBranchState,
    feature: &[f64],
    candidates: &[&ConceptRecord],
) -> Result<Vec<(String, f64)>> {
    let embedded = EmbeddedCandidates::build(branch, candidates)?;
    let ranked = embedded.rank(feature)?;
    Ok(ranked
        .into_iter()
        .map(|(i, s)| (embedded.names[i].clone(), s))
        .collect())
}

fn score_samples(
    branch: &TextBranchState,
    samples: &[VisualSample],
    candidates: &[&ConceptRecord],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Structural("cannot score an empty test set".to_string()));
    }
    let embedded = EmbeddedCandidates::build(branch, candidates)?;
    let mut hits = 0usize;
    let mut reciprocal_sum = 0.0;
    for sample in samples {
        let ranked = embedded.rank(&sample.feature)?;
        let position = ranked
            .iter()
            .position(|&(i, _)| embedded.names[i] == sample.label)
            .ok_or_else(|| {
                Error::Structural(format!(
                    "sample label '{}' is not among the candidates",
                    sample.label
                ))
            })?;
        if position == 0 {
            hits += 1;
        }
        reciprocal_sum += 1.0 / (position + 1) as f64;
    }
    let n = samples.len() as f64;
    Ok((hits as f64 / n, reciprocal_sum / n))
}

/// Evaluation driver bound to one benchmark. The distractor set — the first
/// [`DISTRACTOR_COUNT`] common concepts in lexicographic name order — is
/// fixed at construction so every novel-task cell sees the same mixture.
pub struct Evaluator<'a> {
    benchmark: &'a Benchmark,
    distractors: Vec<&'a ConceptRecord>,
}

impl<'a> Evaluator<'a> {
    pub fn new(benchmark: &'a Benchmark) -> Self {
        let mut common: Vec<&ConceptRecord> = benchmark.common_pool.iter().collect();
        common.sort_by(|a, b| a.name.cmp(&b.name));
        common.truncate(DISTRACTOR_COUNT);
        Self {
            benchmark,
            distractors: common,
        }
    }

    pub fn distractor_names(&self) -> Vec<&str> {
        self.distractors.iter().map(|c| c.name.as_str()).collect()
    }

    /// Common test samples against the full common pool.
    pub fn ovd_retention(&self, branch: &TextBranchState, stage: usize) -> Result<CellScore> {
        let candidates: Vec<&ConceptRecord> = self.benchmark.common_pool.iter().collect();
        let (top1, mrr) = score_samples(branch, &self.benchmark.common_test, &candidates)?;
        Ok(CellScore {
            stage,
            test_set: "common".to_string(),
            protocol: ProtocolKind::OvdRetention,
            top1,
            mrr,
            n_samples: self.benchmark.common_test.len(),
            n_candidates: candidates.len(),
        })
    }

    fn task_cell(
        &self,
        branch: &TextBranchState,
        stage: usize,
        task: usize,
        protocol: ProtocolKind,
        injected: &[usize],
    ) -> Result<CellScore> {
        if !injected.contains(&task) {
            return Err(Error::Protocol(format!(
                "test set for task {task} requested before its concepts were injected"
            )));
        }
        let spec = self.benchmark.task(task)?;
        let mut candidates: Vec<&ConceptRecord> = spec.concepts.iter().collect();
        candidates.extend(self.distractors.iter().copied());
        let (top1, mrr) = score_samples(branch, &spec.test, &candidates)?;
        Ok(CellScore {
            stage,
            test_set: format!("task{task}"),
            protocol,
            top1,
            mrr,
            n_samples: spec.test.len(),
            n_candidates: candidates.len(),
        })
    }

    /// The current task's test samples against its concepts plus distractors.
    pub fn acquisition(
        &self,
        branch: &TextBranchState,
        stage: usize,
        task: usize,
        injected: &[usize],
    ) -> Result<CellScore> {
        self.task_cell(branch, stage, task, ProtocolKind::Acquisition, injected)
    }

    /// An already-injected task's test samples, same candidate recipe.
    pub fn historical(
        &self,
        branch: &TextBranchState,
        stage: usize,
        task: usize,
        injected: &[usize],
    ) -> Result<CellScore> {
        self.task_cell(branch, stage, task, ProtocolKind::Historical, injected)
    }

    /// All cells for one stage: retention, acquisition on `current_task`,
    /// and historical cells for every other injected task in ascending order.
    pub fn stage_scores(
        &self,
        branch: &TextBranchState,
        stage: usize,
        current_task: usize,
        injected: &[usize],
    ) -> Result<Vec<CellScore>> {
        let mut cells = vec![self.ovd_retention(branch, stage)?];
        let mut tasks: Vec<usize> = injected.to_vec();
        tasks.sort_unstable();
        tasks.dedup();
        for task in tasks {
            if task == current_task {
                cells.push(self.acquisition(branch, stage, task, injected)?);
            } else {
                cells.push(self.historical(branch, stage, task, injected)?);
            }
        }
        if !injected.contains(&current_task) {
            return Err(Error::Protocol(format!(
                "stage {stage} scored before task {current_task} was injected"
            )));
        }
        Ok(cells)
    }
}

/// Mean top-1 and MRR over the novel-task cells of the final stage — the
/// last row of the matrix, excluding the common column.
pub fn final_average(cells: &[CellScore], final_stage: usize) -> Option<(f64, f64)> {
    let row: Vec<&CellScore> = cells
        .iter()
        .filter(|c| c.stage == final_stage && c.protocol != ProtocolKind::OvdRetention)
        .collect();
    if row.is_empty() {
        return None;
    }
    let n = row.len() as f64;
    let top1 = row.iter().map(|c| c.top1).sum::<f64>() / n;
    let mrr = row.iter().map(|c| c.mrr).sum::<f64>() / n;
    Some((top1, mrr))
}

/// Full evaluation artifact: every matrix cell plus run-level context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// What the numbers are, for readers of the raw file.
    pub metric_note: String,
    pub version: String,
    pub benchmark_checksum: u64,
    pub config: serde_json::Value,
    pub stages_completed: usize,
    /// Train-sample reads outside the active task observed by the loader.
    pub audit_violations: u64,
    pub cells: Vec<CellScore>,
    /// Mean over the final stage's novel-task cells; absent when no novel
    /// task has been trained yet.
    pub final_avg_top1: Option<f64>,
    pub final_avg_mrr: Option<f64>,
}

pub const METRIC_NOTE: &str = "cells report top-1 accuracy and mean reciprocal rank of \
cosine ranking over the candidate concept set; region proposals are given, so no \
localization metric applies";

impl MetricsReport {
    /// CSV mirror of the cell matrix: one row per cell, fixed column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,test_set,protocol,top1,mrr\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.stage,
                c.test_set,
                c.protocol.tag(),
                c.top1,
                c.mrr
            )
            .expect("string write cannot fail");
        }
        out
    }
}
