//! Scripted deterministic model used as an exact oracle in tests and as the
//! generating model of the synthetic task suite.
//!
//! A context is keyed either by its full prefix or by its last `order`
//! tokens. Keys are 64-bit hashes computed with a fixed mixing function, so
//! scripts are reproducible across processes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_context, HiddenVector, ModelCache, PositionOutput, TargetModel};
use crate::seq::TokenId;

const KEY_INIT: u64 = 0x6a09_e667_f3bc_c908;
const DEFAULT_MARGIN: f64 = 8.0;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn mix(h: u64, t: TokenId) -> u64 {
    splitmix64(h ^ (u64::from(t.0).wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

/// Scripted behaviour at one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub next: TokenId,
    /// Logit of `next`; every other logit is zero.
    pub margin: f64,
    /// Hidden state reported for the context; derived from the key when absent.
    pub hidden: Option<Vec<f64>>,
}

impl TableEntry {
    pub fn new(next: TokenId) -> Self {
        Self {
            next,
            margin: DEFAULT_MARGIN,
            hidden: None,
        }
    }
}

/// Margin that gives the scripted token probability `q` under a softmax
/// over `vocab` logits where all others are zero.
pub fn margin_for_prob(q: f64, vocab: usize) -> f64 {
    let q = q.clamp(1e-9, 1.0 - 1e-9);
    (q * (vocab as f64 - 1.0) / (1.0 - q)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableModel {
    vocab: usize,
    dim: usize,
    /// `None` keys on the full prefix.
    order: Option<usize>,
    fallback: TokenId,
    hidden_seed: u64,
    table: HashMap<u64, TableEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct TableCache {
    keys: Vec<u64>,
}

impl ModelCache for TableCache {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn truncate(&mut self, len: usize) {
        self.keys.truncate(len);
    }
}

impl TableModel {
    pub fn new(vocab: usize, dim: usize, order: Option<usize>, fallback: TokenId) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::Config("vocab and hidden dim must be positive".into()));
        }
        if order == Some(0) {
            return Err(Error::Config("table order must be at least 1".into()));
        }
        if fallback.index() >= vocab {
            return Err(Error::Config("fallback token outside vocabulary".into()));
        }
        Ok(Self {
            vocab,
            dim,
            order,
            fallback,
            hidden_seed: 0,
            table: HashMap::new(),
        })
    }

    pub fn with_hidden_seed(mut self, seed: u64) -> Self {
        self.hidden_seed = seed;
        self
    }

    pub fn order(&self) -> Option<usize> {
        self.order
    }

    pub fn fallback(&self) -> TokenId {
        self.fallback
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Key of the last position of `context`.
    pub fn key_of(&self, context: &[TokenId]) -> u64 {
        match self.order {
            None => context.iter().fold(KEY_INIT, |h, &t| mix(h, t)),
            Some(k) => {
                let start = context.len().saturating_sub(k);
                context[start..].iter().fold(KEY_INIT, |h, &t| mix(h, t))
            }
        }
    }

    fn key_at(&self, context: &[TokenId], i: usize, prev: Option<u64>) -> u64 {
        match (self.order, prev) {
            (None, Some(p)) => mix(p, context[i]),
            (None, None) => self.key_of(&context[..=i]),
            (Some(_), _) => self.key_of(&context[..=i]),
        }
    }

    pub fn insert(&mut self, context: &[TokenId], entry: TableEntry) -> Result<()> {
        if context.is_empty() {
            return Err(Error::Usage("cannot script an empty context".into()));
        }
        self.check_entry(&entry)?;
        let key = self.key_of(context);
        self.table.insert(key, entry);
        Ok(())
    }

    /// Scripts `seq[i + 1]` as the successor of `seq[..=i]` for every
    /// `i >= from`, with a per-position margin chosen by `margin`.
    pub fn insert_sequence(
        &mut self,
        seq: &[TokenId],
        from: usize,
        mut entry_for: impl FnMut(usize, TokenId) -> TableEntry,
    ) -> Result<()> {
        let mut key = None;
        for i in 0..seq.len().saturating_sub(1) {
            let k = self.key_at(seq, i, key);
            key = Some(k);
            if i >= from {
                let entry = entry_for(i, seq[i + 1]);
                self.check_entry(&entry)?;
                self.table.insert(k, entry);
            }
        }
        Ok(())
    }

    fn check_entry(&self, entry: &TableEntry) -> Result<()> {
        if entry.next.index() >= self.vocab {
            return Err(Error::Config(format!(
                "scripted token {} outside vocabulary of size {}",
                entry.next, self.vocab
            )));
        }
        if let Some(h) = &entry.hidden {
            if h.len() != self.dim {
                return Err(Error::Config("scripted hidden vector has wrong dimension".into()));
            }
        }
        Ok(())
    }

    pub fn entry(&self, context: &[TokenId]) -> Option<&TableEntry> {
        self.table.get(&self.key_of(context))
    }

    /// Scripted successor of `context`, or the fallback token.
    pub fn successor(&self, context: &[TokenId]) -> TokenId {
        self.entry(context).map_or(self.fallback, |e| e.next)
    }

    /// Copy of this script where each entry's successor is replaced by a
    /// pseudo-random token with probability `rate`.
    pub fn perturbed(&self, rate: f64, seed: u64) -> Self {
        let mut out = self.clone();
        for (key, entry) in out.table.iter_mut() {
            let r = splitmix64(key ^ seed);
            let u = (r >> 11) as f64 / (1u64 << 53) as f64;
            if u < rate {
                let t = splitmix64(r) % self.vocab as u64;
                entry.next = TokenId(t as u32);
            }
        }
        out
    }

    fn output_for(&self, key: u64) -> PositionOutput {
        let entry = self.table.get(&key);
        let (next, margin) = entry.map_or((self.fallback, DEFAULT_MARGIN), |e| (e.next, e.margin));
        let mut logits = vec![0.0; self.vocab];
        logits[next.index()] = margin;
        let hidden = match entry.and_then(|e| e.hidden.clone()) {
            Some(h) => h,
            None => {
                let mut s = key ^ self.hidden_seed;
                (0..self.dim)
                    .map(|_| {
                        s = splitmix64(s);
                        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                    })
                    .collect()
            }
        };
        PositionOutput {
            logits,
            hidden: HiddenVector(hidden),
        }
    }
}

impl TargetModel for TableModel {
    type Cache = TableCache;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn new_cache(&self) -> TableCache {
        TableCache::default()
    }

    fn forward_cached(&self, cache: &mut TableCache, context: &[TokenId]) -> Result<Vec<PositionOutput>> {
        check_context(context, self.vocab)?;
        if cache.len() > context.len() {
            return Err(Error::Usage("cache is longer than the context".into()));
        }
        let mut out = Vec::with_capacity(context.len() - cache.len());
        for i in cache.len()..context.len() {
            let key = self.key_at(context, i, cache.keys.last().copied());
            cache.keys.push(key);
            out.push(self.output_for(key));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::greedy;
    use crate::seq::tokens;

    fn abc() -> TableModel {
        let mut m = TableModel::new(8, 4, None, TokenId(7)).unwrap();
        m.insert_sequence(&tokens(&[4, 5, 6]), 0, |_, t| TableEntry::new(t))
            .unwrap();
        m
    }

    #[test]
    fn scripted_successors() {
        let m = abc();
        let out = m.forward(&tokens(&[4])).unwrap();
        assert_eq!(greedy(&out[0].logits), TokenId(5));
        let out = m.forward(&tokens(&[4, 5])).unwrap();
        assert_eq!(greedy(&out[1].logits), TokenId(6));
        // unknown prefix falls back
        let out = m.forward(&tokens(&[5])).unwrap();
        assert_eq!(greedy(&out[0].logits), TokenId(7));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = abc();
        let ctx = tokens(&[4, 5, 6, 1]);
        assert_eq!(m.forward(&ctx).unwrap(), m.forward(&ctx).unwrap());
    }

    #[test]
    fn cached_forward_matches_full_forward() {
        let m = abc();
        let ctx = tokens(&[4, 5, 6, 2, 3]);
        let full = m.forward(&ctx).unwrap();
        let mut cache = m.new_cache();
        let mut pieces = m.forward_cached(&mut cache, &ctx[..2]).unwrap();
        pieces.extend(m.forward_cached(&mut cache, &ctx).unwrap());
        assert_eq!(pieces, full);
        cache.truncate(1);
        let redo = m.forward_cached(&mut cache, &ctx).unwrap();
        assert_eq!(redo.len(), 4);
        assert_eq!(redo, full[1..].to_vec());
    }

    #[test]
    fn suffix_order_keys() {
        let mut m = TableModel::new(8, 2, Some(1), TokenId(0)).unwrap();
        m.insert(&tokens(&[3]), TableEntry::new(TokenId(6))).unwrap();
        assert_eq!(m.successor(&tokens(&[5, 4, 3])), TokenId(6));
        assert_eq!(m.successor(&tokens(&[3, 4])), TokenId(0));
    }

    #[test]
    fn margin_realises_probability() {
        let m = margin_for_prob(0.9, 10);
        let mut logits = vec![0.0; 10];
        logits[0] = m;
        let p = crate::linalg::softmax(&logits)[0];
        assert!((p - 0.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let m = abc();
        assert!(m.forward(&[]).is_err());
        assert!(m.forward(&tokens(&[9])).is_err());
        assert!(TableModel::new(8, 4, Some(0), TokenId(0)).is_err());
    }
}
