//! Named parameter arrays with a frozen/trainable partition.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{b64vec, Fnv1a64};

/// One named parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(with = "b64vec")]
    pub values: Vec<f64>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named parameter arrays. Iteration order is the
/// insertion order and is part of the reproducibility contract: flattened
/// views (quantiles, checksums, optimizer sweeps) all follow it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
        trainable: bool,
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Structural(format!("duplicate parameter '{name}'")));
        }
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Structural(format!(
                "parameter '{name}': shape {:?} wants {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            values,
            trainable,
        });
        Ok(())
    }

    /// Rebuild the name index (needed after deserialization, which skips it).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Structural(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Structural(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|e| e.name.clone()).collect()
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|e| e.len()).sum()
    }

    /// Flip the trainable flag of one entry.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// Checksum over names, shapes, trainable flags and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a64::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(&[0]);
            for &d in &e.shape {
                h.update(&(d as u64).to_le_bytes());
            }
            h.update(&[e.trainable as u8]);
            for v in &e.values {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Checksum restricted to the frozen (non-trainable) entries.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Fnv1a64::new();
        for e in self.entries.iter().filter(|e| !e.trainable) {
            h.update(e.name.as_bytes());
            h.update(&[0]);
            for v in &e.values {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Error if any value anywhere is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for e in &self.entries {
            if let Some(pos) = e.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{context}: parameter '{}' has non-finite value at flat index {pos}",
                    e.name
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-entry gradient arrays. Keys are exactly the trainable entry names
/// of the store the gradients were computed against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero-filled gradients for every trainable entry of `params`.
    pub fn zeros_like(params: &ParamStore) -> Self {
        let mut grads = BTreeMap::new();
        for e in params.trainable() {
            grads.insert(e.name.clone(), vec![0.0; e.len()]);
        }
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Result<&Vec<f64>> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Structural(format!("no gradient for '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        match self.grads.get_mut(name) {
            Some(g) => Ok(g),
            None => Err(Error::Structural(format!("no gradient for '{name}'"))),
        }
    }

    pub fn insert(&mut self, name: String, values: Vec<f64>) {
        self.grads.insert(name, values);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.grads.values().map(|v| v.len()).sum()
    }

    /// Keys must equal exactly the trainable names of `params`, with
    /// matching lengths, and every value must be finite.
    pub fn validate_against(&self, params: &ParamStore, context: &str) -> Result<()> {
        let mut seen = 0usize;
        for e in params.trainable() {
            let g = self.grads.get(&e.name).ok_or_else(|| {
                Error::Structural(format!("{context}: missing gradient for '{}'", e.name))
            })?;
            if g.len() != e.len() {
                return Err(Error::Structural(format!(
                    "{context}: gradient for '{}' has {} elements, parameter has {}",
                    e.name,
                    g.len(),
                    e.len()
                )));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{context}: gradient for '{}' non-finite at flat index {pos}",
                    e.name
                )));
            }
            seen += 1;
        }
        if seen != self.grads.len() {
            let extra: Vec<&String> = self
                .grads
                .keys()
                .filter(|k| !params.contains(k) || !params.get(k).map(|e| e.trainable).unwrap_or(false))
                .collect();
            return Err(Error::Structural(format!(
                "{context}: gradients carry unknown or frozen keys {extra:?}"
            )));
        }
        Ok(())
    }

    /// Add another gradient map elementwise (same key set required).
    pub fn add_assign(&mut self, other: &GradientMap) -> Result<()> {
        for (name, g) in &other.grads {
            let mine = self.get_mut(name)?;
            if mine.len() != g.len() {
                return Err(Error::Structural(format!(
                    "gradient add: '{name}' length mismatch {} vs {}",
                    mine.len(),
                    g.len()
                )));
            }
            for (a, b) in mine.iter_mut().zip(g) {
                *a += *b;
            }
        }
        Ok(())
    }

    /// Largest absolute entry over all gradients (0 for an empty map).
    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0_f64, |acc, &x| acc.max(x.abs()))
    }

    /// Flatten magnitudes following the entry order of `params` (trainable
    /// entries only). The order is fixed by the store, not the map.
    pub fn flat_magnitudes(&self, params: &ParamStore) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(params.num_trainable_elements());
        for e in params.trainable() {
            let g = self.get(&e.name)?;
            out.extend(g.iter().map(|v| v.abs()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        s.insert("b", vec![3], vec![5.0, 6.0, 7.0], false).unwrap();
        s
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = store();
        let err = s.insert("a", vec![1], vec![0.0], true).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn shape_product_checked() {
        let mut s = ParamStore::new();
        let err = s.insert("w", vec![2, 3], vec![0.0; 5], true).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let s = store();
        let names: Vec<&str> = s.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn checksum_sensitive_to_bits() {
        let s = store();
        let c0 = s.checksum();
        let mut s2 = s.clone();
        // a 1-ulp nudge must change the checksum
        s2.get_mut("a").unwrap().values[0] = 1.0 + f64::EPSILON;
        assert_ne!(c0, s2.checksum());
        assert_eq!(c0, s.clone().checksum());
    }

    #[test]
    fn gradient_validation_catches_frozen_keys() {
        let s = store();
        let mut g = GradientMap::zeros_like(&s);
        assert_eq!(g.len(), 1);
        g.insert("b".into(), vec![0.0; 3]);
        assert!(g.validate_against(&s, "test").is_err());
    }

    #[test]
    fn check_finite_reports_entry() {
        let mut s = store();
        s.get_mut("a").unwrap().values[2] = f64::NAN;
        let err = s.check_finite("ctx").unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("'a'") && msg.contains("index 2")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
