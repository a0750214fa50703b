//! The trainable text branch: embedding + residual tanh encoder + affine
//! projector, with a frozen/trainable parameter partition and teacher
//! snapshots.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::graph::{encode_plain, project_plain, ModelView};
use crate::diffcore::params::ParamStore;
use crate::error::{Error, Result};
use crate::textmodel::tokenizer::TokenSeq;

/// Static dimensions of the text branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDims {
    pub v_tok: usize,
    pub d: usize,
    pub l_layers: usize,
    pub d_v: usize,
    pub max_tokens: usize,
}

impl TextDims {
    pub fn validate(&self) -> Result<()> {
        if self.v_tok < 2 {
            return Err(Error::Config(format!("v_tok must be >= 2, got {}", self.v_tok)));
        }
        for (name, v) in [
            ("d", self.d),
            ("l_layers", self.l_layers),
            ("d_v", self.d_v),
            ("max_tokens", self.max_tokens),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn layer_weight_name(i: usize) -> String {
        format!("encoder.{i}.weight")
    }

    pub fn layer_bias_name(i: usize) -> String {
        format!("encoder.{i}.bias")
    }

    pub const EMBEDDING: &'static str = "embedding";
    pub const PROJECTOR_WEIGHT: &'static str = "projector.weight";
    pub const PROJECTOR_BIAS: &'static str = "projector.bias";
}

/// Live (student) text branch. The token embedding is always frozen; the
/// trainable partition covers the top `k_trainable` encoder layers plus,
/// optionally, the projector.
#[derive(Debug, Clone)]
pub struct TextBranchState {
    pub dims: TextDims,
    pub params: ParamStore,
    k_trainable: usize,
    projector_trainable: bool,
}

impl TextBranchState {
    /// Seeded initialization: embedding and weights uniform in
    /// (−1/√d, 1/√d), biases zero.
    pub fn init<R: Rng + ?Sized>(
        dims: TextDims,
        k_trainable: usize,
        projector_trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let bound = 1.0 / (dims.d as f64).sqrt();
        let dist = Uniform::new(-bound, bound)
            .map_err(|e| Error::Config(format!("bad init range: {e}")))?;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| dist.sample(rng)).collect() };

        let mut params = ParamStore::new();
        params.insert(
            TextDims::EMBEDDING,
            vec![dims.v_tok, dims.d],
            draw(dims.v_tok * dims.d),
            false,
        )?;
        for i in 0..dims.l_layers {
            params.insert(
                &TextDims::layer_weight_name(i),
                vec![dims.d, dims.d],
                draw(dims.d * dims.d),
                false,
            )?;
            params.insert(
                &TextDims::layer_bias_name(i),
                vec![dims.d],
                vec![0.0; dims.d],
                false,
            )?;
        }
        params.insert(
            TextDims::PROJECTOR_WEIGHT,
            vec![dims.d_v, dims.d],
            draw(dims.d_v * dims.d),
            false,
        )?;
        params.insert(
            TextDims::PROJECTOR_BIAS,
            vec![dims.d_v],
            vec![0.0; dims.d_v],
            false,
        )?;

        let mut branch = Self {
            dims,
            params,
            k_trainable: 0,
            projector_trainable: false,
        };
        branch.partition_parameters(k_trainable, projector_trainable)?;
        Ok(branch)
    }

    /// Rebuild a branch from deserialized parameters (checkpoint load).
    pub fn from_params(
        dims: TextDims,
        params: ParamStore,
        k_trainable: usize,
        projector_trainable: bool,
    ) -> Result<Self> {
        dims.validate()?;
        // shape check happens on first view construction; do it eagerly
        ModelView::new(&dims, &params)?;
        let mut branch = Self {
            dims,
            params,
            k_trainable: 0,
            projector_trainable: false,
        };
        branch.partition_parameters(k_trainable, projector_trainable)?;
        Ok(branch)
    }

    /// Mark exactly the top `k` encoder layers (and optionally the projector)
    /// trainable; everything else frozen.
    pub fn partition_parameters(
        &mut self,
        k: usize,
        projector_trainable: bool,
    ) -> Result<&ParamStore> {
        if k > self.dims.l_layers {
            return Err(Error::Config(format!(
                "k_trainable = {k} exceeds encoder depth {}",
                self.dims.l_layers
            )));
        }
        self.params.set_trainable(TextDims::EMBEDDING, false)?;
        for i in 0..self.dims.l_layers {
            let trainable = i >= self.dims.l_layers - k;
            self.params
                .set_trainable(&TextDims::layer_weight_name(i), trainable)?;
            self.params
                .set_trainable(&TextDims::layer_bias_name(i), trainable)?;
        }
        self.params
            .set_trainable(TextDims::PROJECTOR_WEIGHT, projector_trainable)?;
        self.params
            .set_trainable(TextDims::PROJECTOR_BIAS, projector_trainable)?;
        self.k_trainable = k;
        self.projector_trainable = projector_trainable;
        Ok(&self.params)
    }

    pub fn k_trainable(&self) -> usize {
        self.k_trainable
    }

    pub fn projector_trainable(&self) -> bool {
        self.projector_trainable
    }

    /// E-level embedding: mean of non-pad token rows through the residual
    /// tanh stack.
    pub fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        let view = ModelView::new(&self.dims, &self.params)?;
        encode_plain(&view, tokens)
    }

    /// P-level embedding: affine map of an E-level embedding.
    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        let view = ModelView::new(&self.dims, &self.params)?;
        project_plain(&view, e)
    }

    /// Encode then project in one call.
    pub fn encode_project(&self, tokens: &TokenSeq) -> Result<(Vec<f64>, Vec<f64>)> {
        let view = ModelView::new(&self.dims, &self.params)?;
        let e = encode_plain(&view, tokens)?;
        let p = project_plain(&view, &e)?;
        Ok((e, p))
    }

    /// Freeze a deep copy as the task teacher.
    pub fn snapshot_teacher(&self) -> TeacherBranch {
        let state = self.clone();
        let checksum = state.params.checksum();
        TeacherBranch { state, checksum }
    }
}

/// Immutable deep copy of a branch, frozen for the lifetime of a task.
#[derive(Debug, Clone)]
pub struct TeacherBranch {
    state: TextBranchState,
    checksum: u64,
}

impl TeacherBranch {
    pub fn state(&self) -> &TextBranchState {
        &self.state
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        self.state.encode(tokens)
    }

    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.state.project(e)
    }

    /// Confirm the snapshot still matches its recorded checksum.
    pub fn verify(&self) -> Result<()> {
        if self.state.params.checksum() != self.checksum {
            return Err(Error::Integrity(
                "teacher snapshot parameters diverged from their checksum".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::tokenizer::tokenize;
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

    fn branch_with(dims: TextDims, k: usize, proj: bool, seed: u64) -> TextBranchState {
        let mut rng = derive_rng(seed, "branch-test");
        TextBranchState::init(dims, k, proj, &mut rng).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = branch_with(micro_dims(), 1, true, 3);
        let b = branch_with(micro_dims(), 1, true, 3);
        let c = branch_with(micro_dims(), 1, true, 4);
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn partition_counts() {
        let dims = TextDims {
            v_tok: 11,
            d: 8,
            l_layers: 3,
            d_v: 5,
            max_tokens: 4,
        };
        let mut b = branch_with(dims, 0, false, 1);
        assert_eq!(b.params.num_trainable_elements(), 0);
        b.partition_parameters(0, true).unwrap();
        assert_eq!(b.params.num_trainable_elements(), 8 * 5 + 5);
        b.partition_parameters(2, true).unwrap();
        assert_eq!(b.params.num_trainable_elements(), 2 * (64 + 8) + 45);
        // exactly the TOP layers are trainable
        assert!(!b.params.get("encoder.0.weight").unwrap().trainable);
        assert!(b.params.get("encoder.1.weight").unwrap().trainable);
        assert!(b.params.get("encoder.2.weight").unwrap().trainable);
        assert!(!b.params.get("embedding").unwrap().trainable);
        b.partition_parameters(3, true).unwrap();
        assert_eq!(b.params.num_trainable_elements(), 3 * (64 + 8) + 45);
        assert!(matches!(b.partition_parameters(4, true), Err(Error::Config(_))));
    }

    #[test]
    fn default_partition_count_matches_formula() {
        let dims = TextDims {
            v_tok: 97,
            d: 64,
            l_layers: 12,
            d_v: 64,
            max_tokens: 8,
        };
        let b = branch_with(dims, 4, true, 9);
        let expect = 4 * (64 * 64 + 64) + (64 * 64 + 64);
        assert_eq!(b.params.num_trainable_elements(), expect); // 20800
    }

    #[test]
    fn encode_micro_hand_value() {
        let mut b = branch_with(micro_dims(), 1, true, 5);
        // embedding row 1 = (1, 1); layer 0: W = 0, b = (0.5, 0)
        {
            let emb = b.params.get_mut("embedding").unwrap();
            emb.values[2] = 1.0;
            emb.values[3] = 1.0;
        }
        b.params.get_mut("encoder.0.weight").unwrap().values.fill(0.0);
        {
            let bias = b.params.get_mut("encoder.0.bias").unwrap();
            bias.values[0] = 0.5;
            bias.values[1] = 0.0;
        }
        let e = b.encode(&TokenSeq { ids: vec![1, 0] }).unwrap();
        assert!((e[0] - 1.462_117_157_260_009_8).abs() < 1e-12);
        assert!((e[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn encode_zero_stack_is_mean_embedding() {
        let mut b = branch_with(micro_dims(), 1, true, 6);
        b.params.get_mut("encoder.0.weight").unwrap().values.fill(0.0);
        b.params.get_mut("encoder.0.bias").unwrap().values.fill(0.0);
        let emb = b.params.get("embedding").unwrap().values.clone();
        let got = b.encode(&TokenSeq { ids: vec![1, 2] }).unwrap();
        let want = [
            (emb[2] + emb[4]) / 2.0,
            (emb[3] + emb[5]) / 2.0,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn project_hand_value() {
        let mut b = branch_with(micro_dims(), 1, true, 7);
        {
            let w = b.params.get_mut("projector.weight").unwrap();
            w.values.copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
        }
        {
            let pb = b.params.get_mut("projector.bias").unwrap();
            pb.values.copy_from_slice(&[0.0, 1.0]);
        }
        let p = b.project(&[3.0, 4.0]).unwrap();
        assert_eq!(p, vec![3.0, 9.0]);
    }

    #[test]
    fn encode_input_errors() {
        let b = branch_with(micro_dims(), 1, true, 8);
        assert!(matches!(
            b.encode(&TokenSeq { ids: vec![0, 0] }),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            b.encode(&TokenSeq { ids: vec![9, 0] }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn snapshot_is_immutable() {
        let mut b = branch_with(micro_dims(), 1, true, 10);
        let tokens = tokenize("probe", 5, 2).unwrap();
        let teacher = b.snapshot_teacher();
        let before = teacher.encode(&tokens).unwrap();
        let cs = teacher.checksum();

        // student drifts
        for _ in 0..100 {
            b.params.get_mut("encoder.0.weight").unwrap().values[0] += 0.01;
        }
        assert_eq!(teacher.checksum(), cs);
        teacher.verify().unwrap();
        assert_eq!(teacher.encode(&tokens).unwrap(), before);
        // fresh snapshots of identical state agree
        let t2 = b.snapshot_teacher();
        let t3 = b.snapshot_teacher();
        assert_eq!(t2.checksum(), t3.checksum());
        assert_ne!(t2.checksum(), cs);
    }
}
