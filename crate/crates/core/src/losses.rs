//! Training objectives: region–text contrastive loss, absolute and
//! relational distillation at encoder and projector levels, probe loss,
//! and the combined task objective.

use serde::{Deserialize, Serialize};

use crate::diffcore::graph::{
    evaluate, ComponentSet, EvalRequest, ModelInputs, Region, TeacherCache,
};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::synthworld::{ConceptRecord, VisualSample};
use crate::textmodel::branch::{TeacherBranch, TextBranchState};
use crate::textmodel::tokenizer::TokenSeq;

/// All scalar components of one training step, with the derived sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_abs_e: f64,
    pub l_abs_p: f64,
    pub l_rel_e: f64,
    pub l_rel_p: f64,
    pub l_rssd: f64,
    pub l_probe: f64,
    pub l_task: f64,
}

impl LossBreakdown {
    /// Assemble from the five primitive components; the sums are derived so
    /// the identities (rssd = abs+rel terms, probe = abs terms,
    /// task = con + rssd) hold by construction.
    pub fn from_components(l_con: f64, l_abs_e: f64, l_abs_p: f64, l_rel_e: f64, l_rel_p: f64) -> Self {
        let l_rssd = l_abs_e + l_abs_p + l_rel_e + l_rel_p;
        Self {
            l_con,
            l_abs_e,
            l_abs_p,
            l_rel_e,
            l_rel_p,
            l_rssd,
            l_probe: l_abs_e + l_abs_p,
            l_task: l_con + l_rssd,
        }
    }
}

/// Pairwise cosine-similarity matrix over a set of embeddings. Built by
/// mirroring the upper triangle, so symmetry is exact and the diagonal is
/// exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    n: usize,
    data: Vec<f64>,
}

impl RelationMatrix {
    pub fn from_rows<T: AsRef<[f64]>>(rows: &[T]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Structural(format!(
                "relation matrix needs at least 2 rows, got {n}"
            )));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = cosine(rows[i].as_ref(), rows[i].as_ref())?; // exactly 1.0
            for j in (i + 1)..n {
                let c = cosine(rows[i].as_ref(), rows[j].as_ref())?;
                data[i * n + j] = c;
                data[j * n + i] = c;
            }
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// SmoothL1 of a scalar difference.
pub(crate) fn sl1_value(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of `sl1_value` with respect to d.
pub(crate) fn sl1_deriv(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else if d > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Mean SmoothL1 over two equal-shaped flat arrays.
pub fn smooth_l1_flat(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!(
            "smooth-l1 shape mismatch: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Structural("smooth-l1 over empty arrays".to_string()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth-l1 beta must be positive, got {beta}")));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| sl1_value(x - y, beta))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Mean SmoothL1 between two relation matrices.
pub fn smooth_l1(a: &RelationMatrix, b: &RelationMatrix, beta: f64) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::Structural(format!(
            "smooth-l1 relation shape mismatch: {}x{} vs {}x{}",
            a.n, a.n, b.n, b.n
        )));
    }
    smooth_l1_flat(&a.data, &b.data, beta)
}

/// 1 − mean cosine between index-paired student and teacher embeddings.
pub fn cosine_abs_loss<S: AsRef<[f64]>, T: AsRef<[f64]>>(student: &[S], teacher: &[T]) -> Result<f64> {
    if student.is_empty() {
        return Err(Error::Structural("cosine distillation over empty set".to_string()));
    }
    if student.len() != teacher.len() {
        return Err(Error::Structural(format!(
            "cosine distillation pairs mismatched: {} student vs {} teacher",
            student.len(),
            teacher.len()
        )));
    }
    let mut sum = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        let s = s.as_ref();
        let t = t.as_ref();
        if s.len() != t.len() {
            return Err(Error::Structural(format!(
                "cosine distillation dimension mismatch: {} vs {}",
                s.len(),
                t.len()
            )));
        }
        sum += cosine(s, t)?;
    }
    Ok(1.0 - sum / student.len() as f64)
}

fn candidate_index(candidates: &[ConceptRecord]) -> Result<std::collections::HashMap<&str, usize>> {
    let mut map = std::collections::HashMap::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        if map.insert(c.name.as_str(), i).is_some() {
            return Err(Error::Structural(format!(
                "duplicate candidate concept '{}'",
                c.name
            )));
        }
    }
    Ok(map)
}

fn regions_for<'a>(
    regions: &'a [VisualSample],
    index: &std::collections::HashMap<&str, usize>,
) -> Result<Vec<Region<'a>>> {
    regions
        .iter()
        .map(|s| {
            let label = *index.get(s.label.as_str()).ok_or_else(|| {
                Error::Structural(format!("region label '{}' not among candidates", s.label))
            })?;
            Ok(Region {
                feature: &s.feature,
                label,
            })
        })
        .collect()
}

/// Region→text softmax cross-entropy over the candidate set.
pub fn contrastive_loss(
    regions: &[VisualSample],
    candidates: &[ConceptRecord],
    student: &TextBranchState,
    tau_c: f64,
) -> Result<f64> {
    let index = candidate_index(candidates)?;
    let regs = regions_for(regions, &index)?;
    let tokens: Vec<TokenSeq> = candidates.iter().map(|c| c.tokens.clone()).collect();
    let inputs = ModelInputs {
        dims: student.dims,
        candidates: &tokens,
        old: &[],
        regions: &regs,
        teacher: None,
        tau_c,
        beta: 1.0,
    };
    let req = EvalRequest {
        components: ComponentSet {
            con: true,
            ..ComponentSet::default()
        },
        task_grads: false,
        probe_grads: false,
    };
    Ok(evaluate(&inputs, &student.params, &req)?.breakdown.l_con)
}

/// Dual-level distillation of the old-concept set against a frozen teacher.
pub fn rssd_loss(
    student: &TextBranchState,
    teacher: &TeacherBranch,
    old_concepts: &[ConceptRecord],
    beta: f64,
) -> Result<LossBreakdown> {
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
        beta,
    };
    let req = EvalRequest {
        components: ComponentSet::rssd(),
        task_grads: false,
        probe_grads: false,
    };
    Ok(evaluate(&inputs, &student.params, &req)?.breakdown)
}

/// Joint objective: contrastive over C_old ∪ C_novel plus distillation over
/// C_old.
#[allow(clippy::too_many_arguments)]
pub fn task_loss(
    regions: &[VisualSample],
    old_concepts: &[ConceptRecord],
    novel_concepts: &[ConceptRecord],
    student: &TextBranchState,
    teacher: &TeacherBranch,
    tau_c: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    let candidates: Vec<&ConceptRecord> = old_concepts.iter().chain(novel_concepts).collect();
    let mut index = std::collections::HashMap::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        if index.insert(c.name.as_str(), i).is_some() {
            return Err(Error::Structural(format!(
                "concept '{}' appears in both old and novel sets",
                c.name
            )));
        }
    }
    let regs = regions_for(regions, &index)?;
    let tokens: Vec<TokenSeq> = candidates.iter().map(|c| c.tokens.clone()).collect();
    let old_idx: Vec<usize> = (0..old_concepts.len()).collect();
    let old_tokens = &tokens[..old_concepts.len()];
    let cache = TeacherCache::build(teacher.state(), old_tokens)?;
    let inputs = ModelInputs {
        dims: student.dims,
        candidates: &tokens,
        old: &old_idx,
        regions: &regs,
        teacher: Some(&cache),
        tau_c,
        beta,
    };
    let req = EvalRequest {
        components: ComponentSet::task(true),
        task_grads: false,
        probe_grads: false,
    };
    Ok(evaluate(&inputs, &student.params, &req)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{Pool, Split};
    use crate::textmodel::branch::TextDims;
    use crate::util::derive_rng;

    fn micro_dims() -> TextDims {
        TextDims {
            v_tok: 5,
            d: 2,
            l_layers: 1,
            d_v: 2,
            max_tokens: 2,
        }
    }

    fn record(name: &str, ids: Vec<u32>) -> ConceptRecord {
        ConceptRecord {
            name: name.to_string(),
            prototype: vec![1.0, 0.0],
            tokens: TokenSeq { ids },
            pool: Pool::Novel,
            task_index: Some(1),
        }
    }

    fn sample(label: &str, feature: Vec<f64>) -> VisualSample {
        VisualSample {
            feature,
            label: label.to_string(),
            split: Split::Train,
        }
    }

    /// Branch with every parameter set explicitly.
    fn set_branch(
        dims: TextDims,
        emb_rows: &[(usize, [f64; 2])],
        w: [f64; 4],
        b: [f64; 2],
        pw: [f64; 4],
        pb: [f64; 2],
    ) -> TextBranchState {
        let mut rng = derive_rng(0, "losses-test");
        let mut br = TextBranchState::init(dims, 1, true, &mut rng).unwrap();
        br.params.get_mut("embedding").unwrap().values.fill(0.0);
        for &(row, vals) in emb_rows {
            let e = br.params.get_mut("embedding").unwrap();
            e.values[row * 2] = vals[0];
            e.values[row * 2 + 1] = vals[1];
        }
        br.params.get_mut("encoder.0.weight").unwrap().values.copy_from_slice(&w);
        br.params.get_mut("encoder.0.bias").unwrap().values.copy_from_slice(&b);
        br.params.get_mut("projector.weight").unwrap().values.copy_from_slice(&pw);
        br.params.get_mut("projector.bias").unwrap().values.copy_from_slice(&pb);
        br
    }

    #[test]
    fn breakdown_identities() {
        let b = LossBreakdown::from_components(0.5, 0.1, 0.2, 0.3, 0.4);
        assert_eq!(b.l_rssd, 1.0);
        assert!((b.l_probe - 0.3).abs() < 1e-15);
        assert_eq!(b.l_task, b.l_con + b.l_rssd);
    }

    #[test]
    fn cosine_abs_hand_cases() {
        let id = [vec![0.3, 0.4]];
        assert_eq!(cosine_abs_loss(&id, &id).unwrap(), 0.0);
        let s = [vec![1.0, 0.0]];
        let t = [vec![0.0, 1.0]];
        assert_eq!(cosine_abs_loss(&s, &t).unwrap(), 1.0);
        let s2 = [vec![1.0, 0.0], vec![1.0, 0.0]];
        let t2 = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((cosine_abs_loss(&s2, &t2).unwrap() - 0.5).abs() < 1e-15);
        let empty: [Vec<f64>; 0] = [];
        assert!(cosine_abs_loss(&empty, &empty).is_err());
        let z = [vec![0.0, 0.0]];
        assert!(matches!(cosine_abs_loss(&z, &t), Err(Error::Numeric(_))));
    }

    #[test]
    fn relation_matrix_hand_cases() {
        let r = RelationMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(r.data(), &[1.0, 0.0, 0.0, 1.0]);
        let same = RelationMatrix::from_rows(&vec![vec![0.5, 0.5]; 3]).unwrap();
        assert!(same.data().iter().all(|&x| x == 1.0));
        let r2 = RelationMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!((r2.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(RelationMatrix::from_rows(&[vec![1.0, 0.0]]).is_err());
        assert!(RelationMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn relation_matrix_properties() {
        let mut rng = derive_rng(77, "relation-props");
        use rand::Rng;
        for _ in 0..20 {
            let n = rng.random_range(2..7usize);
            let d = rng.random_range(2..5usize);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + 0.01).collect())
                .collect();
            let r = RelationMatrix::from_rows(&rows).unwrap();
            for i in 0..n {
                assert_eq!(r.get(i, i), 1.0);
                for j in 0..n {
                    assert_eq!(r.get(i, j), r.get(j, i)); // exact symmetry
                    assert!(r.get(i, j) >= -1.0 - 1e-12 && r.get(i, j) <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn smooth_l1_hand_cases() {
        assert_eq!(smooth_l1_flat(&[1.0], &[1.0], 1.0).unwrap(), 0.0);
        assert!((smooth_l1_flat(&[0.5], &[0.0], 1.0).unwrap() - 0.125).abs() < 1e-15);
        assert!((smooth_l1_flat(&[2.0], &[0.0], 1.0).unwrap() - 1.5).abs() < 1e-15);
        assert!(smooth_l1_flat(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(smooth_l1_flat(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn rssd_micro_matches_hand_forward() {
        // Hand-evaluated two-concept micro model: every intermediate
        // (tanh layer, projector output, cosines, relation matrices) was
        // computed step by step in double precision and the four components
        // frozen below.
        let dims = micro_dims();
        let student = set_branch(
            dims,
            &[(1, [0.8, -0.3]), (2, [-0.2, 0.9])],
            [0.5, -0.1, 0.2, 0.4],
            [0.05, -0.02],
            [1.2, 0.3, -0.4, 0.7],
            [0.01, -0.03],
        );
        let teacher_src = set_branch(
            dims,
            &[(1, [0.8, -0.3]), (2, [-0.2, 0.9])],
            [0.45, -0.05, 0.25, 0.35],
            [0.0, 0.01],
            [1.1, 0.25, -0.35, 0.65],
            [0.0, -0.02],
        );
        let teacher = teacher_src.snapshot_teacher();
        let old = [record("a", vec![1, 0]), record("b", vec![2, 0])];
        let b = rssd_loss(&student, &teacher, &old, 1.0).unwrap();
        assert!((b.l_abs_e - 0.000_726_733_508_140_897_7).abs() < 1e-12);
        assert!((b.l_abs_p - 0.001_099_080_640_442_284_8).abs() < 1e-12);
        assert!((b.l_rel_e - 0.000_548_552_029_163_534_1).abs() < 1e-12);
        assert!((b.l_rel_p - 6.617_581_727_474_345e-7).abs() < 1e-15);
        assert!((b.l_rssd - 0.002_375_027_935_919_464_4).abs() < 1e-12);
    }

    #[test]
    fn rssd_zero_when_student_equals_teacher() {
        let mut rng = derive_rng(5, "rssd-zero");
        let student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let teacher = student.snapshot_teacher();
        let old = [record("a", vec![1, 0]), record("b", vec![2, 0])];
        let b = rssd_loss(&student, &teacher, &old, 1.0).unwrap();
        assert_eq!(b.l_abs_e, 0.0);
        assert_eq!(b.l_abs_p, 0.0);
        assert_eq!(b.l_rel_e, 0.0);
        assert_eq!(b.l_rel_p, 0.0);
        assert_eq!(b.l_rssd, 0.0);
    }

    #[test]
    fn rssd_projector_perturbation_leaves_encoder_terms() {
        let mut rng = derive_rng(6, "rssd-proj");
        let mut student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let teacher = student.snapshot_teacher();
        student.params.get_mut("projector.weight").unwrap().values[0] += 0.25;
        let old = [record("a", vec![1, 0]), record("b", vec![2, 0])];
        let b = rssd_loss(&student, &teacher, &old, 1.0).unwrap();
        assert_eq!(b.l_abs_e, 0.0);
        assert_eq!(b.l_rel_e, 0.0);
        assert!(b.l_abs_p > 0.0);
    }

    #[test]
    fn rssd_single_old_concept_drops_relations() {
        let mut rng = derive_rng(7, "rssd-single");
        let mut student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let teacher = student.snapshot_teacher();
        student.params.get_mut("encoder.0.weight").unwrap().values[0] += 0.1;
        let old = [record("a", vec![1, 0])];
        let b = rssd_loss(&student, &teacher, &old, 1.0).unwrap();
        assert!(b.l_abs_e > 0.0);
        assert_eq!(b.l_rel_e, 0.0);
        assert_eq!(b.l_rel_p, 0.0);
    }

    #[test]
    fn rssd_positive_scale_invariance_of_projector_terms() {
        let mut rng = derive_rng(8, "rssd-scale");
        let mut student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let teacher = {
            let mut t = student.clone();
            t.params.get_mut("encoder.0.weight").unwrap().values[1] += 0.2;
            t.params.get_mut("projector.weight").unwrap().values[2] -= 0.15;
            t.snapshot_teacher()
        };
        let old = [record("a", vec![1, 0]), record("b", vec![2, 0])];
        let before = rssd_loss(&student, &teacher, &old, 1.0).unwrap();
        // scale all P-level student outputs by 3.7
        for name in ["projector.weight", "projector.bias"] {
            for v in &mut student.params.get_mut(name).unwrap().values {
                *v *= 3.7;
            }
        }
        let after = rssd_loss(&student, &teacher, &old, 1.0).unwrap();
        assert!((before.l_abs_p - after.l_abs_p).abs() < 1e-10);
        assert!((before.l_rel_p - after.l_rel_p).abs() < 1e-10);
        assert_eq!(before.l_abs_e, after.l_abs_e);
    }

    #[test]
    fn contrastive_singleton_is_zero() {
        let mut rng = derive_rng(9, "con-singleton");
        let student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let cands = [record("a", vec![1, 0])];
        let regions = [sample("a", vec![0.6, 0.8])];
        let l = contrastive_loss(&regions, &cands, &student, 0.1).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn contrastive_two_candidate_hand_value() {
        // P embeddings engineered to (1,0) and (-1,0); feature (1,0);
        // tau = 1 gives logits (1,-1) -> loss ln(1 + e^-2)
        let student = set_branch(
            micro_dims(),
            &[(1, [1.0, 0.0]), (2, [-1.0, 0.0])],
            [0.0; 4],
            [0.0; 2],
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 0.0],
        );
        let cands = [record("a", vec![1, 0]), record("b", vec![2, 0])];
        let regions = [sample("a", vec![1.0, 0.0])];
        let l = contrastive_loss(&regions, &cands, &student, 1.0).unwrap();
        assert!((l - 0.126_928_011_042_972_63).abs() < 1e-15);
    }

    #[test]
    fn contrastive_identical_candidates_uniform() {
        // zero embedding + zero stack + zero projector weight, bias (0.3,-0.2):
        // every candidate projects to the same vector -> uniform softmax
        let student = set_branch(
            micro_dims(),
            &[],
            [0.0; 4],
            [0.0; 2],
            [0.0; 4],
            [0.3, -0.2],
        );
        let cands = [
            record("a", vec![1, 0]),
            record("b", vec![2, 0]),
            record("c", vec![3, 0]),
        ];
        let regions = [sample("b", vec![1.0, 0.0])];
        let l = contrastive_loss(&regions, &cands, &student, 0.1).unwrap();
        assert!((l - 3.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn contrastive_label_must_be_candidate() {
        let mut rng = derive_rng(10, "con-label");
        let student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let cands = [record("a", vec![1, 0])];
        let regions = [sample("zzz", vec![0.6, 0.8])];
        assert!(matches!(
            contrastive_loss(&regions, &cands, &student, 0.1),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn task_loss_is_component_sum() {
        let mut rng = derive_rng(11, "task-sum");
        let mut student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let teacher = student.snapshot_teacher();
        student.params.get_mut("encoder.0.weight").unwrap().values[2] += 0.3;
        let old = [record("a", vec![1, 0]), record("b", vec![2, 0])];
        let novel = [record("n", vec![3, 0])];
        let regions = [sample("n", vec![0.6, 0.8]), sample("a", vec![0.0, 1.0])];
        let b = task_loss(&regions, &old, &novel, &student, &teacher, 0.1, 1.0).unwrap();
        assert!((b.l_task - (b.l_con + b.l_rssd)).abs() < 1e-12);
        assert!(b.l_rssd > 0.0);

        // teacher == student: task loss collapses to the contrastive term
        let student2 = teacher.state().clone();
        let b2 = task_loss(&regions, &old, &novel, &student2, &teacher, 0.1, 1.0).unwrap();
        assert_eq!(b2.l_rssd, 0.0);
        assert_eq!(b2.l_task, b2.l_con);
    }

    #[test]
    fn task_loss_rejects_overlapping_sets() {
        let mut rng = derive_rng(12, "task-overlap");
        let student = TextBranchState::init(micro_dims(), 1, true, &mut rng).unwrap();
        let teacher = student.snapshot_teacher();
        let old = [record("a", vec![1, 0])];
        let novel = [record("a", vec![1, 0])];
        assert!(matches!(
            task_loss(&[], &old, &novel, &student, &teacher, 0.1, 1.0),
            Err(Error::Structural(_))
        ));
    }
}
