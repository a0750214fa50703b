//! Trigram-hash tokenizer: deterministic, case-insensitive, zero vocabulary
//! to learn. Id 0 is the reserved pad; real ids live in [1, v_tok).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// Fixed-length token id sequence for one concept name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    /// Indices of the non-pad ids (pad = 0).
    pub fn non_pad_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().copied().filter(|&id| id != 0)
    }

    pub fn is_all_pad(&self) -> bool {
        self.ids.iter().all(|&id| id == 0)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Map a concept name to token ids: wrap in '^'…'$', slide 3-char windows,
/// hash each trigram with FNV-1a 64 into [1, v_tok), right-pad with 0.
///
/// Names with more trigrams than `max_tokens` keep an evenly spaced
/// selection that always includes the first and last window. Keeping only
/// a prefix would collapse sibling names that differ in their suffix
/// ("…_concept0" vs "…_concept1") onto one sequence, which would make such
/// concepts indistinguishable to the model.
pub fn tokenize(name: &str, v_tok: usize, max_tokens: usize) -> Result<TokenSeq> {
    if v_tok < 2 {
        return Err(Error::Config(format!("v_tok must be at least 2, got {v_tok}")));
    }
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be at least 1".to_string()));
    }
    let trimmed = name.trim();
    if trimmed.is_empty() {
        return Err(Error::Input("cannot tokenize an empty name".to_string()));
    }
    let padded: Vec<char> = std::iter::once('^')
        .chain(trimmed.to_lowercase().chars())
        .chain(std::iter::once('$'))
        .collect();
    let modulus = (v_tok - 1) as u64;
    let hash = |w: &[char]| {
        let tri: String = w.iter().collect();
        1 + (fnv1a64(tri.as_bytes()) % modulus) as u32
    };
    let windows: Vec<&[char]> = padded.windows(3).collect();
    let n = windows.len();
    let mut ids: Vec<u32> = if n <= max_tokens {
        windows.into_iter().map(hash).collect()
    } else if max_tokens == 1 {
        vec![hash(windows[0])]
    } else {
        let m = max_tokens;
        (0..m)
            // round(j * (n-1) / (m-1)) in integer arithmetic; strictly
            // increasing because the real stride exceeds 1 when n > m.
            .map(|j| (j * (n - 1) + (m - 1) / 2) / (m - 1))
            .map(|idx| hash(windows[idx]))
            .collect()
    };
    ids.resize(max_tokens, 0);
    Ok(TokenSeq { ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_case_insensitive() {
        let a = tokenize("Xu", 997, 8).unwrap();
        let b = tokenize("Xu", 997, 8).unwrap();
        let c = tokenize("xU", 997, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_name_rejected() {
        assert!(matches!(tokenize("", 997, 8), Err(Error::Input(_))));
        assert!(matches!(tokenize("   ", 997, 8), Err(Error::Input(_))));
    }

    #[test]
    fn two_char_name_small_vocab() {
        // "^xu$" yields trigrams "^xu", "xu$";
        // 1 + fnv1a64 mod 96 gives 11 and 55 (cross-checked against an
        // independent FNV-1a implementation).
        let seq = tokenize("Xu", 97, 8).unwrap();
        assert_eq!(seq.ids, vec![11, 55, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn trigram_count_and_padding() {
        // n-char name => n trigrams (padding adds two chars)
        for name in ["a", "ab", "abc", "abcd", "concept"] {
            let seq = tokenize(name, 997, 8).unwrap();
            let non_pad = seq.non_pad_ids().count();
            assert_eq!(non_pad, name.len().min(8), "name {name}");
            assert_eq!(seq.len(), 8);
            // pads come after all real ids
            let first_pad = seq.ids.iter().position(|&i| i == 0);
            if let Some(p) = first_pad {
                assert!(seq.ids[p..].iter().all(|&i| i == 0));
            }
        }
    }

    #[test]
    fn long_name_truncates() {
        let seq = tokenize("averylongconceptname", 997, 8).unwrap();
        assert_eq!(seq.len(), 8);
        assert!(!seq.is_all_pad());
        assert_eq!(seq.non_pad_ids().count(), 8);
    }

    #[test]
    fn truncation_keeps_both_ends() {
        // 20-char name -> 20 trigrams; the kept selection must include the
        // first ("^av") and last ("me$") windows.
        let seq = tokenize("averylongconceptname", 997, 8).unwrap();
        let first = tokenize("av", 997, 8).unwrap().ids[0]; // "^av"
        assert_eq!(seq.ids[0], first);
        let modulus = 996u64;
        let last = 1 + (fnv1a64("me$".as_bytes()) % modulus) as u32;
        assert_eq!(seq.ids[7], last);
    }

    #[test]
    fn sibling_names_stay_distinguishable_after_truncation() {
        // Names sharing a long prefix differ only near the end; truncation
        // must not erase that difference.
        for t in 1..=7usize {
            let mut seen = std::collections::BTreeSet::new();
            for i in 0..28usize {
                let seq = tokenize(&format!("task{t}_concept{i}"), 997, 8).unwrap();
                assert!(seen.insert(seq.ids.clone()), "collision at task{t}_concept{i}");
            }
        }
        let a = tokenize("task1_concept0", 997, 8).unwrap();
        let b = tokenize("task2_concept0", 997, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ids_in_range() {
        for i in 0..200 {
            let name = format!("task{}_concept{}", i % 9 + 1, i);
            let seq = tokenize(&name, 997, 8).unwrap();
            assert!(seq.ids.iter().all(|&id| (id as usize) < 997));
            assert!(!seq.is_all_pad());
        }
    }

    #[test]
    fn tiny_vocab_still_valid() {
        let seq = tokenize("abc", 2, 4).unwrap();
        // modulus 1: every trigram maps to id 1
        assert_eq!(seq.ids, vec![1, 1, 1, 0]);
    }
}
