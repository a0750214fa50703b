//! AdamW with bias correction, decoupled weight decay, and retention-mask
//! gating: masked elements keep their bits while their moments decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::params::{GradientMap, ParamStore};
use crate::error::{Error, Result};
use crate::kpd::MaskState;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates per trainable entry plus the step counter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    /// Zero moments for every trainable entry of `params`.
    pub fn new(params: &ParamStore) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in params.trainable() {
            m.insert(e.name.clone(), vec![0.0; e.len()]);
            v.insert(e.name.clone(), vec![0.0; e.len()]);
        }
        Self { m, v, t: 0 }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Vec<f64>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Vec<f64>> {
        self.v.get(name)
    }
}

/// One AdamW step over the trainable entries of `params`.
///
/// Gradients are expected to be pre-masked when a retention mask is active;
/// the mask argument additionally gates the parameter write (gradient term
/// AND decoupled weight decay), so masked elements come out bit-identical.
/// Moments always update from the (possibly zeroed) gradient, which lets
/// them decay toward zero on masked elements.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &GradientMap,
    state: &mut OptimizerState,
    hyper: &AdamWConfig,
    mask: Option<&MaskState>,
) -> Result<()> {
    hyper.validate()?;
    grads.validate_against(params, "adamw_step")?;

    state.t = state.t.checked_add(1).ok_or_else(|| {
        Error::Numeric("optimizer step counter overflow".to_string())
    })?;
    let t = state.t;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);

    for entry in params.iter_mut().filter(|e| e.trainable) {
        let g = grads.get(&entry.name)?;
        let m = state
            .m
            .get_mut(&entry.name)
            .ok_or_else(|| Error::Structural(format!("optimizer missing moments for '{}'", entry.name)))?;
        let v = state
            .v
            .get_mut(&entry.name)
            .ok_or_else(|| Error::Structural(format!("optimizer missing moments for '{}'", entry.name)))?;
        let mask_row = match mask {
            Some(ms) => Some(ms.entry(&entry.name).ok_or_else(|| {
                Error::Structural(format!("mask missing entry '{}'", entry.name))
            })?),
            None => None,
        };
        if let Some(row) = mask_row {
            if row.len() != entry.len() {
                return Err(Error::Structural(format!(
                    "mask for '{}' has {} elements, parameter has {}",
                    entry.name,
                    row.len(),
                    entry.len()
                )));
            }
        }

        for i in 0..entry.values.len() {
            let gi = g[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let live = mask_row.map_or(true, |row| row[i] == 1);
            if live {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = entry.values[i];
                entry.values[i] =
                    theta - hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * theta);
            }
        }
    }

    params.check_finite("adamw_step")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(theta: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", vec![1], vec![theta], true).unwrap();
        p
    }

    fn grad_of(value: f64) -> GradientMap {
        let mut g = GradientMap::new();
        g.insert("w".into(), vec![value]);
        g
    }

    #[test]
    fn hyper_validation() {
        let mut h = AdamWConfig::default();
        h.lr = 0.0;
        assert!(matches!(h.validate(), Err(Error::Config(_))));
        let mut h = AdamWConfig::default();
        h.beta1 = 1.0;
        assert!(matches!(h.validate(), Err(Error::Config(_))));
        let mut h = AdamWConfig::default();
        h.beta2 = -0.1;
        assert!(matches!(h.validate(), Err(Error::Config(_))));
        assert!(AdamWConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = one_param(0.7);
        let mut s = OptimizerState::new(&p);
        let h = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &grad_of(0.0), &mut s, &h, None).unwrap();
        assert_eq!(p.get("w").unwrap().values[0].to_bits(), 0.7_f64.to_bits());
        assert_eq!(s.t, 1);
    }

    #[test]
    fn bias_corrected_first_step() {
        let mut p = one_param(0.0);
        let mut s = OptimizerState::new(&p);
        let h = AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adamw_step(&mut p, &grad_of(0.1), &mut s, &h, None).unwrap();
        let got = p.get("w").unwrap().values[0];
        // bias correction cancels on the first step: delta = -lr * g/(|g|+eps)
        let expect = -1e-3 * (0.1 / (0.1 + 1e-8));
        assert!((got - expect).abs() < 1e-15, "got {got}, expect {expect}");
        assert!((got - (-9.99999e-4)).abs() < 1e-9);
    }

    #[test]
    fn masked_element_is_bit_frozen_under_decay() {
        let mut p = ParamStore::new();
        p.insert("w", vec![2], vec![0.3, -0.4], true).unwrap();
        let before = p.get("w").unwrap().values.clone();
        let mut s = OptimizerState::new(&p);
        let h = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mask = MaskState::from_rows(
            [("w".to_string(), vec![0u8, 1u8])].into_iter().collect(),
            0.5,
            0.5,
            0,
        );
        let mut g = GradientMap::new();
        for _ in 0..50 {
            // pre-masked gradient: zero at the masked slot
            g.insert("w".into(), vec![0.0, 0.25]);
            adamw_step(&mut p, &g, &mut s, &h, Some(&mask)).unwrap();
        }
        let after = &p.get("w").unwrap().values;
        assert_eq!(after[0].to_bits(), before[0].to_bits());
        assert_ne!(after[1].to_bits(), before[1].to_bits());
        // moments on the masked slot decayed from zero start and zero grads: still zero
        assert_eq!(s.first_moment("w").unwrap()[0], 0.0);
        // live slot accumulated momentum
        assert!(s.first_moment("w").unwrap()[1] > 0.0);
    }

    #[test]
    fn moments_decay_on_masked_slot() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p);
        let h = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        // one unmasked step to charge the moments
        adamw_step(&mut p, &grad_of(0.5), &mut s, &h, None).unwrap();
        let m1 = s.first_moment("w").unwrap()[0];
        assert!((m1 - 0.05).abs() < 1e-15);
        // now a masked step with zeroed gradient: m <- beta1 * m
        let mask = MaskState::from_rows(
            [("w".to_string(), vec![0u8])].into_iter().collect(),
            0.0,
            0.5,
            1,
        );
        let frozen = p.get("w").unwrap().values[0];
        adamw_step(&mut p, &grad_of(0.0), &mut s, &h, Some(&mask)).unwrap();
        assert_eq!(p.get("w").unwrap().values[0].to_bits(), frozen.to_bits());
        let m2 = s.first_moment("w").unwrap()[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut p = one_param(0.2);
            let mut s = OptimizerState::new(&p);
            let h = AdamWConfig::default();
            for i in 0..10 {
                adamw_step(&mut p, &grad_of(0.01 * (i as f64 + 1.0)), &mut s, &h, None).unwrap();
            }
            p.get("w").unwrap().values[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_entries_never_touched() {
        let mut p = ParamStore::new();
        p.insert("train", vec![1], vec![0.5], true).unwrap();
        p.insert("frozen", vec![1], vec![0.9], false).unwrap();
        let mut s = OptimizerState::new(&p);
        let h = AdamWConfig::default();
        let mut g = GradientMap::new();
        g.insert("train".into(), vec![1.0]);
        for _ in 0..20 {
            adamw_step(&mut p, &g, &mut s, &h, None).unwrap();
        }
        assert_eq!(p.get("frozen").unwrap().values[0].to_bits(), 0.9_f64.to_bits());
        assert_ne!(p.get("train").unwrap().values[0].to_bits(), 0.5_f64.to_bits());
    }
}
