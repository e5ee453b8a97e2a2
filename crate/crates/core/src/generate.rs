//! Stochastic beam search with temperature, top-k and nucleus filtering.
//!
//! Every live beam samples up to `num_beams` distinct continuations from its
//! filtered, temperature-scaled next-token distribution. All continuations
//! are then ranked by cumulative log-probability and the best `num_beams`
//! survive.

use rand::Rng;

use crate::autodiff::softmax_into;
use crate::model::CausalLm;
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub num_beams: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    /// Generated tokens per sequence, the end-of-document token included.
    pub max_tokens: usize,
    /// Sequences with more generated tokens than this are set aside.
    pub length_filter: Option<usize>,
    /// Rank beams by temperature-1 log-probabilities (otherwise by the
    /// sampling temperature).
    pub score_at_unit_temperature: bool,
    /// Rank beams by mean instead of summed log-probability.
    pub length_normalize: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            num_beams: 5,
            top_k: 50,
            top_p: 0.9,
            temperature: 3.0,
            max_tokens: 40,
            length_filter: Some(30),
            score_at_unit_temperature: true,
            length_normalize: false,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0 {
            return Err(Error::invalid("num_beams must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Generated tokens (the prompt excluded), ending with the
    /// end-of-document token when the model emitted it.
    pub tokens: Vec<u32>,
    /// Sum of the token log-probabilities used for ranking.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationOutput {
    /// Sorted by descending score.
    pub kept: Vec<Generated>,
    /// Sequences dropped by the length filter.
    pub filtered: Vec<Generated>,
}

/// `softmax(logits / temperature)`.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let mut p = vec![0.0; logits.len()];
    softmax_into(&scaled, &mut p);
    p
}

/// The filtered candidate set for one step: tokens sorted by probability
/// (ties to the lower id), cut at the shortest prefix whose mass reaches
/// `top_p` and at `top_k` entries, whichever is shorter. Probabilities are
/// renormalised over the set.
pub fn candidate_set(logits: &[f64], cfg: &GenerationConfig) -> Vec<(u32, f64)> {
    let p = tempered_probs(logits, cfg.temperature);
    let mut order: Vec<u32> = (0..p.len() as u32).collect();
    order.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, &t) in order.iter().enumerate() {
        mass += p[t as usize];
        if mass >= cfg.top_p {
            keep = i + 1;
            break;
        }
    }
    keep = keep.min(cfg.top_k);
    let total: f64 = order[..keep].iter().map(|&t| p[t as usize]).sum();
    order[..keep].iter().map(|&t| (t, p[t as usize] / total)).collect()
}

/// Draws up to `n` distinct entries, each draw proportional to the weights
/// of what is left.
fn sample_without_replacement(cands: &[(u32, f64)], n: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut left: Vec<(u32, f64)> = cands.to_vec();
    let mut out = Vec::with_capacity(n.min(left.len()));
    while out.len() < n && !left.is_empty() {
        let total: f64 = left.iter().map(|c| c.1).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = left.len() - 1;
        for (i, c) in left.iter().enumerate() {
            if u < c.1 {
                pick = i;
                break;
            }
            u -= c.1;
        }
        out.push(left.remove(pick).0);
    }
    out
}

fn context(prefix: &[u32], context_len: usize) -> &[u32] {
    &prefix[prefix.len().saturating_sub(context_len)..]
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    score: f64,
}

/// Generates up to `num_beams` sequences. Without a prompt the
/// end-of-document token `eod` serves as the start symbol.
pub fn generate(model: &dyn CausalLm, cfg: &GenerationConfig, prompt: Option<&[u32]>, eod: u32) -> Result<GenerationOutput> {
    cfg.validate()?;
    let vocab = model.vocab_size();
    if eod as usize >= vocab {
        return Err(Error::invalid(format!("end-of-document id {eod} outside vocabulary of {vocab}")));
    }
    let start: Vec<u32> = match prompt {
        Some(p) if !p.is_empty() => p.to_vec(),
        _ => vec![eod],
    };
    if let Some(bad) = start.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("prompt token {bad} outside vocabulary of {vocab}")));
    }
    if start.len() >= model.context_len() {
        return Err(Error::invalid(format!(
            "prompt of {} tokens leaves no room in a context of {}",
            start.len(),
            model.context_len()
        )));
    }

    let mut rng = seed::derived_rng(cfg.seed, "generate");
    let rank = |b: &Beam| {
        if cfg.length_normalize {
            b.score / b.tokens.len().max(1) as f64
        } else {
            b.score
        }
    };
    let mut live = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    let mut scratch = vec![0.0; vocab];

    for step in 0..cfg.max_tokens {
        let mut continuations = Vec::new();
        for beam in &live {
            let mut prefix = start.clone();
            prefix.extend_from_slice(&beam.tokens);
            let logits = model.logits(context(&prefix, model.context_len()))?;
            let last = logits.row(logits.rows() - 1);
            if last.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite logits during generation".into()));
            }
            let score_temp = if cfg.score_at_unit_temperature { 1.0 } else { cfg.temperature };
            let scaled: Vec<f64> = last.iter().map(|l| l / score_temp).collect();
            let lse = softmax_into(&scaled, &mut scratch);
            let cands = candidate_set(last, cfg);
            for t in sample_without_replacement(&cands, cfg.num_beams, &mut rng) {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                continuations.push(Beam {
                    tokens,
                    score: beam.score + scaled[t as usize] - lse,
                });
            }
        }
        continuations.sort_by(|a, b| rank(b).total_cmp(&rank(a)).then_with(|| a.tokens.cmp(&b.tokens)));

        live.clear();
        let last_step = step + 1 == cfg.max_tokens;
        for c in continuations {
            if live.len() == cfg.num_beams {
                break;
            }
            if c.tokens.last() == Some(&eod) || last_step {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        finished.sort_by(|a, b| rank(b).total_cmp(&rank(a)).then_with(|| a.tokens.cmp(&b.tokens)));
        finished.truncate(cfg.num_beams);
        // Summed log-probabilities only fall, so a full finished set that
        // beats every live beam is final.
        let settled = !cfg.length_normalize
            && finished.len() == cfg.num_beams
            && live.iter().all(|b| rank(b) <= rank(&finished[finished.len() - 1]));
        if live.is_empty() || settled {
            break;
        }
    }

    let mut out = GenerationOutput::default();
    for b in finished {
        let generated = Generated {
            score: b.score,
            tokens: b.tokens,
        };
        let len = generated.tokens.iter().filter(|&&t| t != eod).count();
        match cfg.length_filter {
            Some(limit) if len > limit => out.filtered.push(generated),
            _ => out.kept.push(generated),
        }
    }
    Ok(out)
}
