//! Small shared helpers: hashing, seeded RNG derivation, base64 float codec.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Build identifier stamped into artifacts (crate version plus git describe
/// when built inside a checkout).
pub const BUILD_VERSION: &str = env!("NOINJECT_BUILD_VERSION");

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a 64-bit over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental FNV-1a, for checksumming larger structures without
/// materialising one buffer.
#[derive(Debug, Clone)]
pub struct Fnv1a64(u64);

impl Fnv1a64 {
    pub fn new() -> Self {
        Self(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Derive an independent, reproducible RNG stream from a base seed and a
/// label. Streams with different labels are decorrelated, so e.g. the
/// common pool can be resampled without touching novel-task draws.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Fnv1a64::new();
    h.update(&seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Encode a float slice as base64 over little-endian IEEE-754 bytes.
/// The representation is bit-exact: decode(encode(x)) == x for every
/// finite or non-finite value.
pub fn f64s_to_b64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn b64_to_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Integrity(format!("bad base64 float block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Integrity(format!(
            "float block length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serde adapter: serialize `Vec<f64>` as a base64 string of LE bytes.
pub mod b64vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&super::f64s_to_b64(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        super::b64_to_f64s(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        // Reference values for the standard FNV-1a 64 test strings.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn b64_roundtrip_bitexact() {
        let xs = vec![0.0, -0.0, 1.5, f64::MIN_POSITIVE, 1.0 / 3.0, -1e300];
        let back = b64_to_f64s(&f64s_to_b64(&xs)).unwrap();
        assert_eq!(xs.len(), back.len());
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn derive_rng_streams_differ() {
        use rand::RngCore;
        let mut a = derive_rng(7, "alpha");
        let mut b = derive_rng(7, "beta");
        let mut a2 = derive_rng(7, "alpha");
        assert_ne!(a.next_u64(), b.next_u64());
        let mut x = derive_rng(7, "alpha");
        assert_eq!(x.next_u64(), a2.next_u64());
    }
}
