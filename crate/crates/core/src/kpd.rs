//! Knowledge-preserving decomposition: probe gradients on the old-concept
//! set, a joint nearest-rank quantile threshold over all trainable elements,
//! and the resulting binary update mask.
//!
//! Elements whose probe-gradient magnitude is at most the threshold are
//! considered uncommitted to previously learned concepts and stay live
//! (mask 1); the rest are frozen for the current refresh interval (mask 0).

use std::collections::BTreeMap;

use crate::diffcore::graph::{evaluate, ComponentSet, EvalRequest, ModelInputs, TeacherCache};
use crate::diffcore::params::{GradientMap, ParamStore};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::synthworld::ConceptRecord;
use crate::textmodel::branch::{TeacherBranch, TextBranchState};
use crate::textmodel::tokenizer::TokenSeq;

/// Binary per-element update mask over the trainable parameters, with the
/// threshold it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    masks: BTreeMap<String, Vec<u8>>,
    threshold: f64,
    ratio: f64,
    refresh_step: u64,
}

impl MaskState {
    pub fn from_rows(
        masks: BTreeMap<String, Vec<u8>>,
        threshold: f64,
        ratio: f64,
        refresh_step: u64,
    ) -> Self {
        Self {
            masks,
            threshold,
            ratio,
            refresh_step,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&[u8]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Global step at which this mask was (re)built.
    pub fn refresh_step(&self) -> u64 {
        self.refresh_step
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    pub fn retained(&self) -> usize {
        self.masks
            .values()
            .flat_map(|row| row.iter())
            .filter(|&&b| b == 1)
            .count()
    }

    pub fn retained_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.retained() as f64 / total as f64
        }
    }

    /// (name, retained, total) per parameter entry, in name order.
    pub fn entry_retention(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.masks.iter().map(|(name, row)| {
            let kept = row.iter().filter(|&&b| b == 1).count();
            (name.as_str(), kept, row.len())
        })
    }
}

/// Nearest-rank quantile: sort ascending, take element at rank
/// clamp(ceil(ratio * N), 1, N).
pub fn quantile_threshold(magnitudes: &[f64], ratio: f64) -> Result<f64> {
    if magnitudes.is_empty() {
        return Err(Error::Structural(
            "quantile threshold over empty magnitude set".to_string(),
        ));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "update ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if let Some(bad) = magnitudes.iter().find(|m| !m.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite probe-gradient magnitude {bad} in quantile threshold"
        )));
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare totally"));
    let n = sorted.len();
    let rank = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Build the update mask from probe gradients: one joint quantile over all
/// trainable elements, ties retained via `<=`.
pub fn build_mask(
    params: &ParamStore,
    probe_grads: &GradientMap,
    ratio: f64,
    refresh_step: u64,
) -> Result<MaskState> {
    probe_grads.validate_against(params, "build_mask")?;
    let magnitudes = probe_grads.flat_magnitudes(params)?;
    let threshold = quantile_threshold(&magnitudes, ratio)?;
    let mut masks = BTreeMap::new();
    for e in params.trainable() {
        let g = probe_grads.get(&e.name)?;
        let row: Vec<u8> = g.iter().map(|&x| u8::from(x.abs() <= threshold)).collect();
        masks.insert(e.name.clone(), row);
    }
    Ok(MaskState::from_rows(masks, threshold, ratio, refresh_step))
}

/// Zero the gradient of every frozen (mask 0) element in place.
pub fn apply_mask(grads: &mut GradientMap, mask: &MaskState) -> Result<()> {
    for (name, row) in &mask.masks {
        let g = grads.get_mut(name)?;
        if g.len() != row.len() {
            return Err(Error::Structural(format!(
                "mask for '{name}' has {} elements, gradient has {}",
                row.len(),
                g.len()
            )));
        }
        for (gi, &mi) in g.iter_mut().zip(row) {
            if mi == 0 {
                *gi = 0.0;
            }
        }
    }
    Ok(())
}

/// Probe loss (abs distillation at both levels over the old concepts) and
/// its gradient with respect to the trainable parameters.
pub fn probe_gradients(
    student: &TextBranchState,
    teacher: &TeacherBranch,
    old_concepts: &[ConceptRecord],
) -> Result<(LossBreakdown, GradientMap)> {
    if old_concepts.is_empty() {
        return Err(Error::Protocol(
            "mask update requires a non-empty old-concept set".to_string(),
        ));
    }
    let tokens: Vec<TokenSeq> = old_concepts.iter().map(|c| c.tokens.clone()).collect();
    let cache = TeacherCache::build(teacher.state(), &tokens)?;
    let old: Vec<usize> = (0..tokens.len()).collect();
    let inputs = ModelInputs {
        dims: student.dims,
        candidates: &tokens,
        old: &old,
        regions: &[],
        teacher: Some(&cache),
        tau_c: 1.0,
        beta: 1.0,
    };
    let req = EvalRequest {
        components: ComponentSet::probe(),
        task_grads: false,
        probe_grads: true,
    };
    let eval = evaluate(&inputs, &student.params, &req)?;
    let grads = eval
        .probe_grads
        .ok_or_else(|| Error::Structural("probe evaluation returned no gradients".to_string()))?;
    Ok((eval.breakdown, grads))
}

/// Convenience: probe, threshold, and mask in one call.
pub fn refresh_mask(
    student: &TextBranchState,
    teacher: &TeacherBranch,
    old_concepts: &[ConceptRecord],
    ratio: f64,
    refresh_step: u64,
) -> Result<(LossBreakdown, GradientMap, MaskState)> {
    let (breakdown, grads) = probe_gradients(student, teacher, old_concepts)?;
    let mask = build_mask(&student.params, &grads, ratio, refresh_step)?;
    Ok((breakdown, grads, mask))
}
