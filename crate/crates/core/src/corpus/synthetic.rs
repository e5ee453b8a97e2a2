use rand::seq::SliceRandom;

use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    TokenPermutation,
    LocalWordReversal { window: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticLanguageSpec {
    pub kind: SyntheticKind,
    pub seed: u64,
}

/// The ground truth relating source and synthetic corpora.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SyntheticMapping {
    /// `perm[t]` is the synthetic id of source token `t`. Ids at or past
    /// `perm.len()` (the end-of-document token) map to themselves.
    Permutation(Vec<u32>),
    Reversal { window: usize },
}

impl SyntheticMapping {
    pub fn map_token(&self, t: u32) -> u32 {
        match self {
            SyntheticMapping::Permutation(p) => p.get(t as usize).copied().unwrap_or(t),
            SyntheticMapping::Reversal { .. } => t,
        }
    }

    /// The inverse mapping; reversal is its own inverse.
    pub fn inverse(&self) -> SyntheticMapping {
        match self {
            SyntheticMapping::Permutation(p) => {
                let mut inv = vec![0u32; p.len()];
                for (t, &pt) in p.iter().enumerate() {
                    inv[pt as usize] = t as u32;
                }
                SyntheticMapping::Permutation(inv)
            }
            r => r.clone(),
        }
    }

    pub fn apply(&self, docs: &[Vec<u32>]) -> Vec<Vec<u32>> {
        match self {
            SyntheticMapping::Permutation(_) => docs
                .iter()
                .map(|d| d.iter().map(|&t| self.map_token(t)).collect())
                .collect(),
            SyntheticMapping::Reversal { window } => docs
                .iter()
                .map(|d| {
                    let mut d = d.clone();
                    for chunk in d.chunks_mut(*window) {
                        chunk.reverse();
                    }
                    d
                })
                .collect(),
        }
    }
}

/// Builds a synthetic target language from documents tokenized with a
/// `vocab_size`-token vocabulary. The permutation covers ids below
/// `vocab_size`; the end-of-document id keeps its meaning.
pub fn make_synthetic_language(
    docs: &[Vec<u32>],
    vocab_size: usize,
    spec: &SyntheticLanguageSpec,
) -> Result<(Vec<Vec<u32>>, SyntheticMapping)> {
    let mapping = match spec.kind {
        SyntheticKind::TokenPermutation => {
            if vocab_size == 0 {
                return Err(Error::invalid("vocabulary size must be positive"));
            }
            let mut perm: Vec<u32> = (0..vocab_size as u32).collect();
            perm.shuffle(&mut seed::derived_rng(spec.seed, "synthetic-permutation"));
            SyntheticMapping::Permutation(perm)
        }
        SyntheticKind::LocalWordReversal { window } => {
            if window < 2 {
                return Err(Error::invalid(format!("reversal window {window} must be at least 2")));
            }
            SyntheticMapping::Reversal { window }
        }
    };
    Ok((mapping.apply(docs), mapping))
}
