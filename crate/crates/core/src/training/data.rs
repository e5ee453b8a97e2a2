use rand::seq::SliceRandom;

use crate::seed;

/// Token id used to fill padded batch rows. Padded positions never reach
/// the loss.
pub const PAD_ID: u32 = 0;

/// Splits every document into consecutive non-overlapping windows of at most
/// `window_len` tokens. Windows never span two documents, and a trailing
/// window shorter than two tokens is dropped since it holds no prediction.
pub fn make_windows(documents: &[Vec<u32>], window_len: usize) -> Vec<Vec<u32>> {
    assert!(window_len >= 2, "window length must be at least 2");
    documents
        .iter()
        .flat_map(|doc| doc.chunks(window_len))
        .filter(|w| w.len() >= 2)
        .map(<[u32]>::to_vec)
        .collect()
}

/// Sequences padded to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    fn from_sequences(seqs: Vec<&Vec<u32>>) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let lengths = seqs.iter().map(|s| s.len()).collect();
        let rows = seqs
            .into_iter()
            .map(|s| {
                let mut r = s.clone();
                r.resize(width, PAD_ID);
                r
            })
            .collect();
        Batch { rows, lengths }
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of padded positions.
    pub fn padding(&self) -> usize {
        self.lengths.iter().map(|&l| self.width() - l).sum()
    }

    /// Row `i` without its padding.
    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.rows[i][..self.lengths[i]]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.len()).map(|i| self.sequence(i))
    }
}

/// Groups sequences of similar length into batches of `batch_examples`, then
/// shuffles the batch order with `seed`.
///
/// Sequences are sorted by length (stable, so equal lengths keep their input
/// order) and cut into consecutive runs, which minimises the length spread
/// inside each batch.
pub fn bucketed_batches(sequences: &[Vec<u32>], batch_examples: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_examples >= 1, "batch size must be positive");
    let mut order: Vec<&Vec<u32>> = sequences.iter().collect();
    order.sort_by_key(|s| s.len());
    let mut batches: Vec<Batch> = order
        .chunks(batch_examples)
        .map(|c| Batch::from_sequences(c.to_vec()))
        .collect();
    batches.shuffle(&mut seed::derived_rng(seed, "batch-order"));
    batches
}
