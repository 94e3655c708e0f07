use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::hashing::hash_bytes;
use crate::{Error, Result};

/// Sparse feature vector: `(index, value)` pairs sorted by index, no
/// duplicate indices, no explicit zeros.
pub type SparseVec = Vec<(u32, f64)>;

fn default_orders() -> Vec<usize> {
    vec![1, 2]
}

/// Shape of the shared encoder and of its hashed n-gram input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hash_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
    #[serde(default)]
    pub hash_seed: u64,
    #[serde(default = "default_orders")]
    pub ngram_orders: Vec<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim == 0 || self.hash_dim > u32::MAX as usize {
            return Err(Error::Config(format!("hash_dim {} out of range", self.hash_dim)));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "hidden_dims must be a nonempty list of positive widths".into(),
            ));
        }
        if self.hidden_dims.last() != Some(&self.repr_dim) {
            return Err(Error::Config(format!(
                "repr_dim {} must equal the last hidden width {:?}",
                self.repr_dim,
                self.hidden_dims.last()
            )));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(Error::Config("ngram_orders must be positive".into()));
        }
        Ok(())
    }
}

/// Signed hashed bag of n-grams over lowercased whitespace tokens.
///
/// Each n-gram is hashed with `hash_seed`; the low bits pick the bucket and
/// the top bit the sign, so colliding n-grams partially cancel instead of
/// piling up.
pub fn featurize(text: &str, cfg: &EncoderConfig) -> SparseVec {
    featurize_tokens(&tokenize(text), cfg)
}

pub fn featurize_tokens(tokens: &[String], cfg: &EncoderConfig) -> SparseVec {
    let mut raw: Vec<(u32, f64)> = Vec::new();
    let mut key = Vec::new();
    for &n in &cfg.ngram_orders {
        for window in tokens.windows(n) {
            key.clear();
            key.push(n as u8);
            for (i, tok) in window.iter().enumerate() {
                if i > 0 {
                    key.push(0x1f);
                }
                key.extend_from_slice(tok.as_bytes());
            }
            let h = hash_bytes(cfg.hash_seed, &key);
            let idx = (h % cfg.hash_dim as u64) as u32;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            raw.push((idx, sign));
        }
    }
    raw.sort_by_key(|e| e.0);
    let mut out: SparseVec = Vec::with_capacity(raw.len());
    for (idx, v) in raw {
        match out.last_mut() {
            Some(last) if last.0 == idx => last.1 += v,
            _ => out.push((idx, v)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(orders: Vec<usize>) -> EncoderConfig {
        EncoderConfig {
            hash_dim: 1 << 10,
            hidden_dims: vec![8],
            repr_dim: 8,
            hash_seed: 5,
            ngram_orders: orders,
        }
    }

    #[test]
    fn empty_text_is_zero() {
        assert!(featurize("", &cfg(vec![1, 2])).is_empty());
        assert!(featurize("   ", &cfg(vec![1, 2])).is_empty());
    }

    #[test]
    fn deterministic_and_seeded() {
        let c = cfg(vec![1, 2]);
        assert_eq!(featurize("the cat sat", &c), featurize("the cat sat", &c));
        let mut other = c.clone();
        other.hash_seed = 6;
        assert_ne!(featurize("the cat sat", &c), featurize("the cat sat", &other));
    }

    #[test]
    fn unigrams_ignore_order() {
        let c = cfg(vec![1]);
        assert_eq!(featurize("a b", &c), featurize("b a", &c));
        let c2 = cfg(vec![1, 2]);
        assert_ne!(featurize("a b", &c2), featurize("b a", &c2));
    }

    #[test]
    fn counts_are_signed_and_sorted() {
        let c = cfg(vec![1]);
        let v = featurize("a a a", &c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].1.abs(), 3.0);
        let w = featurize("a b c d e f g h", &c);
        assert!(w.windows(2).all(|p| p[0].0 < p[1].0));
        assert!(w.iter().all(|e| (e.0 as usize) < c.hash_dim));
    }

    #[test]
    fn case_insensitive() {
        let c = cfg(vec![1, 2]);
        assert_eq!(featurize("Good Movie", &c), featurize("good movie", &c));
    }

    #[test]
    fn config_checks() {
        let mut c = cfg(vec![1]);
        assert!(c.validate().is_ok());
        c.repr_dim = 4;
        assert!(c.validate().is_err());
        let mut c = cfg(vec![]);
        assert!(c.validate().is_err());
        c.ngram_orders = vec![1];
        c.hidden_dims.clear();
        assert!(c.validate().is_err());
    }
}
