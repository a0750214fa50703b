//! Run configuration: a single strict TOML document covering benchmark
//! generation, model shape, training hyperparameters and seeds. Unknown
//! keys are rejected; every field is validated before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::WorldConfig;
use crate::textmodel::branch::TextDims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub v_tok: usize,
    pub d: usize,
    pub l_layers: usize,
    pub d_v: usize,
    pub max_tokens: usize,
    /// Number of top encoder layers trained during injection.
    pub k_trainable: usize,
    pub projector_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            v_tok: 997,
            d: 64,
            l_layers: 12,
            d_v: 64,
            max_tokens: 8,
            k_trainable: 4,
            projector_trainable: true,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> TextDims {
        TextDims {
            v_tok: self.v_tok,
            d: self.d,
            l_layers: self.l_layers,
            d_v: self.d_v,
            max_tokens: self.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.k_trainable > self.l_layers {
            return Err(Error::Config(format!(
                "model.k_trainable = {} exceeds model.l_layers = {}",
                self.k_trainable, self.l_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Stop early once common-pool top-1 reaches this.
    pub target_accuracy: f64,
    /// Reaching the step cap below this accuracy is a diagnostic error.
    pub floor_accuracy: f64,
    pub max_steps: u64,
    /// Evaluate common-pool accuracy every this many steps.
    pub check_interval: u64,
    /// Ephemeral training samples drawn per common concept.
    pub samples_per_concept: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            target_accuracy: 0.95,
            floor_accuracy: 0.60,
            max_steps: 2000,
            check_interval: 50,
            samples_per_concept: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 0-based epoch indices at which the learning rate picks up another
    /// factor of `lr_decay_factor` (cumulative from that epoch on).
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    /// Contrastive softmax temperature.
    pub tau_c: f64,
    pub smooth_l1_beta: f64,
    pub weight_decay: f64,
    /// Quantile of probe-gradient magnitudes kept live by the mask.
    pub r_update_ratio: f64,
    /// Rebuild the mask every this many steps within a task.
    pub mask_refresh_interval: u64,
    pub kpd_enabled: bool,
    pub rssd_enabled: bool,
    /// Replay the whole schedule a second time from the final student.
    pub second_round: bool,
    /// When set, each task draws this many common anchors afresh from the
    /// common pool instead of using the whole fixed pool as C_old's common
    /// part. Evaluation always uses the full pool.
    pub resample_common_anchors: Option<usize>,
    pub pretrain: PretrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            lr: 1e-3,
            lr_decay_epochs: vec![11, 20],
            lr_decay_factor: 0.1,
            batch_size: 16,
            tau_c: 0.1,
            smooth_l1_beta: 1.0,
            weight_decay: 1e-4,
            r_update_ratio: 0.5,
            mask_refresh_interval: 1,
            kpd_enabled: true,
            rssd_enabled: true,
            second_round: false,
            resample_common_anchors: None,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training.epochs must be at least 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "training.lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "training.lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        for (i, w) in self.lr_decay_epochs.windows(2).enumerate() {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "training.lr_decay_epochs must be strictly increasing (position {i})"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".to_string()));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(Error::Config(format!(
                "training.tau_c must be positive and finite, got {}",
                self.tau_c
            )));
        }
        if !(self.smooth_l1_beta > 0.0 && self.smooth_l1_beta.is_finite()) {
            return Err(Error::Config(format!(
                "training.smooth_l1_beta must be positive and finite, got {}",
                self.smooth_l1_beta
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "training.weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.r_update_ratio > 0.0 && self.r_update_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "training.r_update_ratio must lie in (0, 1], got {}",
                self.r_update_ratio
            )));
        }
        if self.mask_refresh_interval == 0 {
            return Err(Error::Config(
                "training.mask_refresh_interval must be at least 1".to_string(),
            ));
        }
        if self.resample_common_anchors == Some(0) {
            return Err(Error::Config(
                "training.resample_common_anchors must be at least 1 when set".to_string(),
            ));
        }
        let p = &self.pretrain;
        if !(p.target_accuracy > 0.0 && p.target_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "training.pretrain.target_accuracy must lie in (0, 1], got {}",
                p.target_accuracy
            )));
        }
        if !(p.floor_accuracy >= 0.0 && p.floor_accuracy <= p.target_accuracy) {
            return Err(Error::Config(format!(
                "training.pretrain.floor_accuracy must lie in [0, target], got {}",
                p.floor_accuracy
            )));
        }
        if p.enabled && (p.max_steps == 0 || p.check_interval == 0) {
            return Err(Error::Config(
                "training.pretrain.max_steps and check_interval must be at least 1".to_string(),
            ));
        }
        if p.enabled && p.samples_per_concept == 0 {
            return Err(Error::Config(
                "training.pretrain.samples_per_concept must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub benchmark: u64,
    pub run: u64,
    /// Common-pool seed; defaults to the benchmark seed.
    pub common: Option<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            benchmark: 7,
            run: 1,
            common: None,
        }
    }
}

impl SeedConfig {
    pub fn common_seed(&self) -> u64 {
        self.common.unwrap_or(self.benchmark)
    }
}

/// The complete run configuration. `output_dir` is accepted from the file
/// but never serialized back, so artifact config echoes stay path-free and
/// byte-stable across machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub benchmark: WorldConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub seeds: SeedConfig,
    #[serde(skip_serializing)]
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io_context(format!("cannot read config '{}'", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    /// Path-free JSON echo embedded into artifacts.
    pub fn echo(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self)
            .map_err(|e| Error::Structural(format!("config echo serialization failed: {e}")))
    }
}
