//! Strided-window perplexity, nearest-neighbour intersection between
//! embedding spaces, and alignment tables.

use std::collections::HashMap;
use std::fmt;

use crate::autodiff::{softmax_into, Tensor};
use crate::model::CausalLm;
use crate::transform::{check_nonzero_rows, nearest_rows};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    pub scored_tokens: usize,
    /// Mean negative log-likelihood in nats.
    pub mean_nll: f64,
    pub perplexity: f64,
    pub window: usize,
    pub stride: usize,
}

impl PerplexityReport {
    fn from_totals(total_nll: f64, scored_tokens: usize, window: usize, stride: usize) -> Result<Self> {
        if scored_tokens == 0 {
            return Err(Error::invalid("no tokens to score"));
        }
        let mean_nll = total_nll / scored_tokens as f64;
        Ok(PerplexityReport {
            scored_tokens,
            mean_nll,
            perplexity: mean_nll.exp(),
            window,
            stride,
        })
    }
}

impl fmt::Display for PerplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "window={} stride={} scored_tokens={} mean_nll={:.6} perplexity={:.6}",
            self.window, self.stride, self.scored_tokens, self.mean_nll, self.perplexity
        )
    }
}

/// One model call of a strided evaluation: the window `[start, end)` and
/// the positions `[first_scored, end)` whose tokens it scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoredWindow {
    pub start: usize,
    pub end: usize,
    pub first_scored: usize,
}

/// The windows used for a sequence of length `len`. The first window covers
/// `[0, window)`; each later one advances its end by `stride`, keeps `window`
/// tokens of context and scores only tokens no earlier window scored. The
/// last window is anchored at the end of the sequence. A token that would be
/// first in its own window has no context and is left unscored, which only
/// happens when `stride == window`.
pub fn strided_windows(len: usize, window: usize, stride: usize) -> Result<Vec<ScoredWindow>> {
    if window < 2 {
        return Err(Error::invalid(format!("window {window} must be at least 2")));
    }
    if stride == 0 || stride > window {
        return Err(Error::invalid(format!("stride {stride} must be in 1..={window}")));
    }
    if len < 2 {
        return Err(Error::invalid(format!("sequence of {len} token(s) has nothing to score")));
    }
    let mut end = window.min(len);
    let mut out = vec![ScoredWindow {
        start: 0,
        end,
        first_scored: 1,
    }];
    while end < len {
        let prev = end;
        end = (prev + stride).min(len);
        let start = end.saturating_sub(window);
        out.push(ScoredWindow {
            start,
            end,
            first_scored: prev.max(start + 1),
        });
    }
    Ok(out)
}

/// `−log softmax(row)[target]`.
fn token_nll(row: &[f64], target: u32, scratch: &mut [f64]) -> f64 {
    let lse = softmax_into(row, scratch);
    lse - row[target as usize]
}

/// Total NLL and number of scored tokens over one sequence.
fn strided_totals(model: &dyn CausalLm, tokens: &[u32], window: usize, stride: usize) -> Result<(f64, usize)> {
    if window > model.context_len() {
        return Err(Error::invalid(format!(
            "window {window} exceeds the model context of {}",
            model.context_len()
        )));
    }
    let windows = strided_windows(tokens.len(), window, stride)?;
    let mut scratch = vec![0.0; model.vocab_size()];
    let (mut total, mut count) = (0.0, 0);
    for w in windows {
        let logits = model.logits(&tokens[w.start..w.end])?;
        for pos in w.first_scored..w.end {
            total += token_nll(logits.row(pos - 1 - w.start), tokens[pos], &mut scratch);
            count += 1;
        }
    }
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite log-likelihood".into()));
    }
    Ok((total, count))
}

/// Perplexity of one token sequence with a moving window.
pub fn strided_perplexity(model: &dyn CausalLm, tokens: &[u32], window: usize, stride: usize) -> Result<PerplexityReport> {
    let (total, count) = strided_totals(model, tokens, window, stride)?;
    PerplexityReport::from_totals(total, count, window, stride)
}

/// Perplexity over several documents, each evaluated on its own; documents
/// shorter than two tokens are skipped. Summation follows input order.
pub fn corpus_perplexity(
    model: &dyn CausalLm,
    documents: &[Vec<u32>],
    window: usize,
    stride: usize,
) -> Result<PerplexityReport> {
    let (mut total, mut count) = (0.0, 0);
    for doc in documents.iter().filter(|d| d.len() >= 2) {
        let (t, c) = strided_totals(model, doc, window, stride)?;
        total += t;
        count += c;
    }
    PerplexityReport::from_totals(total, count, window, stride)
}

/// Mean over tokens `i` of `|N_a(i) ∩ N_b(i)| / k`, where `N_a(i)` are the
/// `k` cosine-nearest rows of `anchors_a` to `emb_a[i]` (likewise for b).
pub fn intersection_at_k(
    emb_a: &Tensor,
    anchors_a: &Tensor,
    emb_b: &Tensor,
    anchors_b: &Tensor,
    k: usize,
) -> Result<f64> {
    if emb_a.rows() != emb_b.rows() || anchors_a.rows() != anchors_b.rows() {
        return Err(Error::shape("both spaces need the same tokens and anchors"));
    }
    if emb_a.cols() != anchors_a.cols() || emb_b.cols() != anchors_b.cols() {
        return Err(Error::shape("embeddings and anchors differ in width"));
    }
    if k == 0 || k > anchors_a.rows() {
        return Err(Error::invalid(format!("k = {k} must be in 1..={}", anchors_a.rows())));
    }
    if emb_a.rows() == 0 {
        return Err(Error::invalid("no tokens to compare"));
    }
    for (t, what) in [(emb_a, "embedding"), (anchors_a, "anchor"), (emb_b, "embedding"), (anchors_b, "anchor")] {
        check_nonzero_rows(t, what)?;
    }
    let mut total = 0.0;
    for i in 0..emb_a.rows() {
        let mut na: Vec<usize> = nearest_rows(emb_a.row(i), anchors_a, k).into_iter().map(|p| p.0).collect();
        na.sort_unstable();
        let shared = nearest_rows(emb_b.row(i), anchors_b, k)
            .into_iter()
            .filter(|(j, _)| na.binary_search(j).is_ok())
            .count();
        total += shared as f64 / k as f64;
    }
    Ok(total / emb_a.rows() as f64)
}

/// Cosine similarity, zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRow {
    pub anchor: u32,
    /// Target token ids with cosine similarity, most similar first.
    pub neighbours: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentTable {
    pub rows: Vec<AlignmentRow>,
}

impl AlignmentTable {
    /// Tab-separated text: the anchor token, then `token (similarity)` for
    /// every neighbour, with tokens named by the given functions.
    pub fn render(&self, anchor_name: impl Fn(u32) -> String, target_name: impl Fn(u32) -> String) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!("{:?}", anchor_name(row.anchor)));
            for (t, s) in &row.neighbours {
                out.push_str(&format!("\t{:?} ({s:.3})", target_name(*t)));
            }
            out.push('\n');
        }
        out
    }

    /// Fraction of rows whose first neighbour is `expected(anchor)`.
    pub fn top1_accuracy(&self, expected: impl Fn(u32) -> u32) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let hits = self
            .rows
            .iter()
            .filter(|r| r.neighbours.first().is_some_and(|n| n.0 == expected(r.anchor)))
            .count();
        hits as f64 / self.rows.len() as f64
    }
}

/// For each anchor token id, the `top_n` rows of `emb_target` most
/// cosine-similar to its row in `emb_anchor` (ties to the lower id).
pub fn nearest_neighbor_alignment(
    emb_target: &Tensor,
    emb_anchor: &Tensor,
    anchors: &[u32],
    top_n: usize,
) -> Result<AlignmentTable> {
    if emb_target.cols() != emb_anchor.cols() {
        return Err(Error::shape(format!(
            "target width {} differs from anchor width {}",
            emb_target.cols(),
            emb_anchor.cols()
        )));
    }
    if top_n == 0 {
        return Ok(AlignmentTable::default());
    }
    let mut rows = Vec::with_capacity(anchors.len());
    for &a in anchors {
        if a as usize >= emb_anchor.rows() {
            return Err(Error::invalid(format!("anchor id {a} outside the anchor embedding")));
        }
        let q = emb_anchor.row(a as usize);
        let mut sims: Vec<(u32, f64)> =
            (0..emb_target.rows()).map(|j| (j as u32, cosine_similarity(q, emb_target.row(j)))).collect();
        sims.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        sims.truncate(top_n);
        rows.push(AlignmentRow { anchor: a, neighbours: sims });
    }
    Ok(AlignmentTable { rows })
}

/// The `n` most frequent token ids, ties to the lower id.
pub fn most_frequent_tokens(documents: &[Vec<u32>], n: usize) -> Vec<u32> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for t in documents.iter().flatten() {
        *counts.entry(*t).or_default() += 1;
    }
    let mut by_count: Vec<(u32, usize)> = counts.into_iter().collect();
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    by_count.into_iter().take(n).map(|p| p.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LAYER_NORM_EPS;
    use crate::model::{init_params, GptParams, ModelConfig};
    use rand::Rng;

    /// Uniform logits, or those of `inner`, plus a constant `offset`.
    struct Fixed {
        vocab: usize,
        context: usize,
        offset: f64,
        inner: Option<GptParams>,
    }

    impl CausalLm for Fixed {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn context_len(&self) -> usize {
            self.context
        }
        fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
            let mut t = match &self.inner {
                Some(p) => p.logits(tokens)?,
                None => Tensor::zeros(&[tokens.len(), self.vocab]),
            };
            t.data_mut().iter_mut().for_each(|v| *v += self.offset);
            Ok(t)
        }
    }

    fn uniform(vocab: usize) -> Fixed {
        Fixed {
            vocab,
            context: 64,
            offset: 0.0,
            inner: None,
        }
    }

    fn small_model(seed: u64) -> GptParams {
        init_params(&ModelConfig::new(1, 8, 2, 16, 11, seed)).unwrap()
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let tokens: Vec<u32> = (0..40).map(|i| i % 7).collect();
        for (w, s) in [(4, 1), (8, 3), (16, 16), (64, 32)] {
            let r = strided_perplexity(&uniform(7), &tokens, w, s).unwrap();
            assert!((r.perplexity - 7.0).abs() < 1e-12, "{w}/{s}: {}", r.perplexity);
        }
    }

    #[test]
    fn window_plan_covers_every_token_once() {
        for len in 2..40 {
            for window in 2..12 {
                for stride in 1..=window {
                    let plan = strided_windows(len, window, stride).unwrap();
                    let mut hits = vec![0; len];
                    for w in &plan {
                        assert!(w.end - w.start <= window && w.first_scored > w.start);
                        for h in &mut hits[w.first_scored..w.end] {
                            *h += 1;
                        }
                    }
                    assert!(hits.iter().all(|&h| h <= 1));
                    if stride < window {
                        assert_eq!(hits[0], 0);
                        assert!(hits[1..].iter().all(|&h| h == 1), "{len} {window} {stride}");
                    }
                    if stride < window && len > window && (len - window) % stride == 0 {
                        assert_eq!(plan.iter().map(|w| w.end - w.first_scored).sum::<usize>(), len - 1);
                    }
                }
            }
        }
    }

    #[test]
    fn window_plan_errors() {
        assert!(strided_windows(10, 4, 5).is_err());
        assert!(strided_windows(10, 4, 0).is_err());
        assert!(strided_windows(0, 4, 2).is_err());
        assert!(strided_windows(1, 4, 2).is_err());
        assert!(strided_perplexity(&small_model(0), &[1, 2, 3], 32, 8).is_err());
    }

    #[test]
    fn short_sequence_equals_full_context() {
        let m = small_model(1);
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let logits = m.logits(&tokens).unwrap();
        let mut scratch = vec![0.0; 11];
        let want: f64 = (1..8).map(|t| token_nll(logits.row(t - 1), tokens[t], &mut scratch)).sum::<f64>() / 7.0;
        let r = strided_perplexity(&m, &tokens, 16, 4).unwrap();
        assert_eq!(r.scored_tokens, 7);
        assert!((r.mean_nll - want).abs() < 1e-12);
    }

    #[test]
    fn stride_equal_to_window_is_chunked() {
        let m = small_model(2);
        let tokens: Vec<u32> = (0..24).map(|i| (i * 7 % 11) as u32).collect();
        let r = strided_perplexity(&m, &tokens, 8, 8).unwrap();
        let (mut total, mut count) = (0.0, 0);
        for chunk in tokens.chunks(8) {
            let one = strided_perplexity(&m, chunk, 8, 8).unwrap();
            total += one.mean_nll * one.scored_tokens as f64;
            count += one.scored_tokens;
        }
        assert_eq!(r.scored_tokens, count);
        assert!((r.mean_nll - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let tokens: Vec<u32> = (0..30).map(|i| (i * 5 % 11) as u32).collect();
        let base = Fixed {
            vocab: 11,
            context: 16,
            offset: 0.0,
            inner: Some(small_model(3)),
        };
        let shifted = Fixed { offset: 17.5, ..base };
        let a = strided_perplexity(&shifted, &tokens, 8, 3).unwrap();
        let b = strided_perplexity(&Fixed { offset: 0.0, ..shifted }, &tokens, 8, 3).unwrap();
        assert!((a.perplexity - b.perplexity).abs() < 1e-10);
    }

    #[test]
    fn hand_computed_zero_layer_window_4_stride_2() {
        // Zero layers: logits at position p (within the window) for token t
        // are LN(E[t] + P[p]) · Eᵀ.
        let cfg = ModelConfig::new(0, 2, 1, 4, 2, 0);
        let mut m = init_params(&cfg).unwrap();
        m.token_embedding = Tensor::from_rows(&[vec![0.3, -0.2], vec![-0.5, 0.4]]).unwrap();
        m.positional_embedding =
            Tensor::from_rows(&[vec![0.1, 0.7], vec![-0.6, 0.2], vec![0.0, -0.3], vec![0.9, 0.5]]).unwrap();
        m.final_ln_gain = Tensor::from_vec(&[2], vec![1.3, 0.6]).unwrap();
        m.final_ln_bias = Tensor::from_vec(&[2], vec![0.2, -0.1]).unwrap();
        let e: [[f64; 2]; 2] = [[0.3, -0.2], [-0.5, 0.4]];
        let pe: [[f64; 2]; 4] = [[0.1, 0.7], [-0.6, 0.2], [0.0, -0.3], [0.9, 0.5]];
        let (g, b): ([f64; 2], [f64; 2]) = ([1.3, 0.6], [0.2, -0.1]);
        let prob = |tok: usize, pos: usize, next: usize| -> f64 {
            let x = [e[tok][0] + pe[pos][0], e[tok][1] + pe[pos][1]];
            let mean = (x[0] + x[1]) / 2.0;
            let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
            let h: Vec<f64> =
                (0..2).map(|i| (x[i] - mean) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i]).collect();
            let z: Vec<f64> = (0..2).map(|v| h[0] * e[v][0] + h[1] * e[v][1]).collect();
            z[next].exp() / (z[0].exp() + z[1].exp())
        };
        let seq = [0usize, 1, 1, 0, 1, 0];
        // Window [0,4) scores tokens 1..3 from positions 0..2; window [2,6)
        // scores tokens 4 and 5 from window positions 1 and 2.
        let nll = -(prob(seq[0], 0, seq[1]).ln()
            + prob(seq[1], 1, seq[2]).ln()
            + prob(seq[2], 2, seq[3]).ln()
            + prob(seq[3], 1, seq[4]).ln()
            + prob(seq[4], 2, seq[5]).ln());
        let want = (nll / 5.0).exp();
        let tokens: Vec<u32> = seq.iter().map(|&t| t as u32).collect();
        let r = strided_perplexity(&m, &tokens, 4, 2).unwrap();
        assert_eq!(r.scored_tokens, 5);
        assert!((r.perplexity - want).abs() < 1e-10, "{} vs {want}", r.perplexity);
    }

    #[test]
    fn corpus_perplexity_skips_short_documents() {
        let docs = vec![vec![1, 2, 3], vec![4], vec![5, 6]];
        let r = corpus_perplexity(&uniform(9), &docs, 4, 2).unwrap();
        assert_eq!(r.scored_tokens, 3);
        assert!((r.perplexity - 9.0).abs() < 1e-12);
        assert!(r.to_string().contains("perplexity=9.000000"));
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn intersection_identical_spaces() {
        let (e, a) = (random(10, 4, 1), random(20, 4, 2));
        assert_eq!(intersection_at_k(&e, &a, &e, &a, 5).unwrap(), 1.0);
    }

    #[test]
    fn intersection_disjoint_neighbourhoods() {
        // Space a: token near anchors 0,1. Space b: near anchors 2,3.
        let anchors = Tensor::from_rows(&[vec![1.0, 0.1], vec![1.0, -0.1], vec![-1.0, 0.1], vec![-1.0, -0.1]]).unwrap();
        let ea = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let eb = Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        assert_eq!(intersection_at_k(&ea, &anchors, &eb, &anchors, 2).unwrap(), 0.0);
    }

    #[test]
    fn intersection_symmetric_and_rotation_invariant() {
        let (ea, aa) = (random(15, 4, 3), random(30, 4, 4));
        let (eb, ab) = (random(15, 6, 5), random(30, 6, 6));
        let x = intersection_at_k(&ea, &aa, &eb, &ab, 7).unwrap();
        assert_eq!(x, intersection_at_k(&eb, &ab, &ea, &aa, 7).unwrap());
        let q = crate::linalg::polar_factor(&random(6, 6, 7)).unwrap();
        let y = intersection_at_k(&ea, &aa, &eb.matmul(&q).unwrap(), &ab.matmul(&q).unwrap(), 7).unwrap();
        assert!((x - y).abs() < 1e-10);
        assert!(intersection_at_k(&Tensor::zeros(&[1, 4]), &aa, &eb.matmul(&q).unwrap(), &ab, 3).is_err());
    }

    #[test]
    fn alignment_of_identical_spaces_is_identity() {
        let e = random(12, 5, 8);
        let ids: Vec<u32> = (0..12).collect();
        let table = nearest_neighbor_alignment(&e, &e, &ids, 3).unwrap();
        assert!(table.rows.iter().all(|r| r.neighbours[0].0 == r.anchor));
        assert_eq!(table.top1_accuracy(|t| t), 1.0);
        assert!(nearest_neighbor_alignment(&e, &e, &ids, 0).unwrap().rows.is_empty());
        let v = crate::tokenizer::Vocabulary::bytes_only();
        let text = table.render(|t| v.display_token(t), |t| v.display_token(t));
        assert_eq!(text.lines().count(), 12);
        assert_eq!(text.lines().next().unwrap().split('\t').count(), 4);
    }

    #[test]
    fn frequent_tokens_order() {
        let docs = vec![vec![5, 3, 3, 9], vec![9, 3, 1]];
        assert_eq!(most_frequent_tokens(&docs, 3), vec![3, 9, 1]);
    }
}
