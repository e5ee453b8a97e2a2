//! The training regime: fixed-length windows, length-bucketed batches,
//! gradient accumulation, Adam, an LR range test for the initial rate,
//! plateau decay on the training loss and early stopping on the dev loss.
//!
//! Every update respects a [`FreezeSpec`]: tensors outside the trainable
//! groups are neither differentiated nor touched by the optimizer, so they
//! come out of [`train`] bitwise identical.

mod adam;
mod data;
mod lr_finder;
mod schedule;

use std::io::Write;

use rand::seq::SliceRandom;

pub use adam::Adam;
pub use data::{bucketed_batches, make_windows, Batch, PAD_ID};
pub use lr_finder::{geometric_rates, lr_range_test, LrFinderResult};
pub use schedule::{EarlyStop, EarlyStopper, Ema, PlateauDecay};

use crate::autodiff::Tensor;
use crate::model::{forward, FreezeSpec, GptParams};
use crate::{seed, Error, Result};

/// Gradient sums over any number of sequences, normalised per token when
/// the optimizer step is taken.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    grads: Vec<Option<Tensor>>,
    nll: f64,
    tokens: usize,
    examples: usize,
}

impl GradAccumulator {
    pub fn new(params: &GptParams) -> Self {
        GradAccumulator {
            grads: vec![None; params.named().len()],
            nll: 0.0,
            tokens: 0,
            examples: 0,
        }
    }

    /// Adds the summed next-token loss of one sequence and its gradient.
    pub fn add_sequence(&mut self, params: &GptParams, seq: &[u32], freeze: &FreezeSpec) -> Result<()> {
        if seq.len() < 2 {
            return Ok(());
        }
        let fwd = forward(params, &seq[..seq.len() - 1], Some(freeze))?;
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let mut tape = fwd.tape;
        let loss = tape.cross_entropy(fwd.logits, &targets, 1.0)?;
        let mut grads = tape.backward(loss)?;
        for (slot, var) in self.grads.iter_mut().zip(&fwd.params) {
            if let Some(g) = grads.take(*var) {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        self.nll += tape.value(loss).item()?;
        self.tokens += targets.len();
        self.examples += 1;
        Ok(())
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    /// Mean per-token loss of everything accumulated so far.
    pub fn mean_loss(&self) -> f64 {
        self.nll / self.tokens as f64
    }

    /// Per-token mean gradients; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Option<Tensor>> {
        let scale = 1.0 / self.tokens.max(1) as f64;
        let n = self.grads.len();
        let out = std::mem::replace(&mut self.grads, vec![None; n])
            .into_iter()
            .map(|g| {
                g.map(|mut t| {
                    t.data_mut().iter_mut().for_each(|v| *v *= scale);
                    t
                })
            })
            .collect();
        self.nll = 0.0;
        self.tokens = 0;
        self.examples = 0;
        out
    }
}

/// Mean next-token cross-entropy per predicted token over `sequences`.
pub fn mean_token_loss(params: &GptParams, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in sequences.iter().filter(|s| s.len() >= 2) {
        let fwd = forward(params, &seq[..seq.len() - 1], None)?;
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let mut tape = fwd.tape;
        let loss = tape.cross_entropy(fwd.logits, &targets, 1.0)?;
        nll += tape.value(loss).item()?;
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::invalid("no predictable tokens to evaluate"));
    }
    Ok(nll / count as f64)
}

/// One Adam update of the trainable groups of `params`.
pub fn apply_update(
    params: &mut GptParams,
    adam: &mut Adam,
    grads: &[Option<Tensor>],
    freeze: &FreezeSpec,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    let trainable: Vec<bool> = tensors.iter().map(|(g, _)| freeze.is_trainable(*g)).collect();
    let mut refs: Vec<&mut Tensor> = tensors.iter_mut().map(|(_, t)| &mut **t).collect();
    adam.step(&mut refs, grads, &trainable, lr)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LearningRate {
    Fixed(f64),
    /// Pick the initial rate with an LR range test over this sweep.
    RangeTest { lr_min: f64, lr_max: f64, steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: LearningRate,
    /// Examples whose gradients are summed before each optimizer step.
    pub accumulation_examples: usize,
    pub window_len: usize,
    pub batch_examples: usize,
    /// Optimizer steps without a 0.1% improvement of the smoothed training
    /// loss before the rate is decayed.
    pub plateau_patience: usize,
    pub plateau_decay: f64,
    /// Dev evaluations (one per epoch) without improvement before stopping.
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: LearningRate::RangeTest {
                lr_min: 1e-6,
                lr_max: 1.0,
                steps: 100,
            },
            accumulation_examples: 2000,
            window_len: 128,
            batch_examples: 32,
            plateau_patience: 10,
            plateau_decay: 0.9,
            early_stop_patience: Some(2),
            max_epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for full finetuning: a low fixed rate of 1e-5.
    pub fn finetune() -> Self {
        TrainConfig {
            learning_rate: LearningRate::Fixed(1e-5),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_decay > 0.0 && self.plateau_decay < 1.0) {
            return Err(Error::invalid("plateau decay must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == Some(0) {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.accumulation_examples == 0 || self.batch_examples == 0 {
            return Err(Error::invalid("batch and accumulation sizes must be positive"));
        }
        if self.window_len < 2 {
            return Err(Error::invalid("window length must be at least 2"));
        }
        if let LearningRate::Fixed(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(Error::invalid("learning rate must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// Dev loss of the parameters handed to [`train`].
    pub initial_dev_loss: f64,
    pub evals: Vec<EvalRecord>,
    pub lr_finder: Option<LrFinderResult>,
    pub stop_reason: StopReason,
    /// Index into `evals` of the checkpoint that was returned.
    pub best_eval: usize,
}

impl TrainHistory {
    pub fn best_dev_loss(&self) -> f64 {
        self.evals[self.best_eval].loss
    }

    /// Line-delimited `step<TAB>split<TAB>loss<TAB>lr` records.
    pub fn write_log(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step\tsplit\tloss\tlr")?;
        writeln!(out, "0\tdev\t{}\t-", self.initial_dev_loss)?;
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step < s.step) {
                writeln!(out, "{}\tdev\t{}\t-", e.step, e.loss)?;
            }
            writeln!(out, "{}\ttrain\t{}\t{}", s.step, s.loss, s.lr)?;
        }
        for e in evals {
            writeln!(out, "{}\tdev\t{}\t-", e.step, e.loss)?;
        }
        Ok(())
    }
}

/// LR range test on a model: each sweep step accumulates gradients over
/// `examples_per_step` sequences (cycling through a seeded shuffle of
/// `sequences`) and applies one Adam update.
#[allow(clippy::too_many_arguments)]
pub fn lr_range_test_model(
    params: &GptParams,
    sequences: &[Vec<u32>],
    freeze: &FreezeSpec,
    lr_min: f64,
    lr_max: f64,
    steps: usize,
    examples_per_step: usize,
    seed: u64,
) -> Result<LrFinderResult> {
    if sequences.is_empty() {
        return Err(Error::invalid("LR range test needs data"));
    }
    let mut order: Vec<&Vec<u32>> = sequences.iter().collect();
    order.shuffle(&mut seed::derived_rng(seed, "lr-finder"));
    let mut work = params.clone();
    let mut adam = Adam::new(work.named().iter().map(|p| p.tensor));
    let mut acc = GradAccumulator::new(&work);
    let mut cursor = 0;
    lr_range_test(
        |lr| {
            for _ in 0..examples_per_step.max(1) {
                acc.add_sequence(&work, order[cursor % order.len()], freeze)?;
                cursor += 1;
            }
            let loss = acc.mean_loss();
            let grads = acc.take_mean();
            apply_update(&mut work, &mut adam, &grads, freeze, lr)?;
            if !work.is_finite() {
                return Ok(f64::NAN);
            }
            Ok(loss)
        },
        lr_min,
        lr_max,
        steps,
    )
}

/// Trains `params` on `train_docs` (tokenized documents), evaluating on
/// `dev_docs` after every epoch, and returns the best dev checkpoint.
pub fn train(
    params: &GptParams,
    train_docs: &[Vec<u32>],
    dev_docs: &[Vec<u32>],
    cfg: &TrainConfig,
    freeze: &FreezeSpec,
) -> Result<(GptParams, TrainHistory)> {
    cfg.validate()?;
    if cfg.window_len > params.config().context_len + 1 {
        return Err(Error::invalid(format!(
            "window of {} tokens needs a context of at least {}",
            cfg.window_len,
            cfg.window_len - 1
        )));
    }
    let windows = make_windows(train_docs, cfg.window_len);
    let dev = make_windows(dev_docs, cfg.window_len);
    if windows.is_empty() {
        return Err(Error::invalid("training data has no window of two or more tokens"));
    }
    if dev.is_empty() {
        return Err(Error::invalid("dev data must not be empty"));
    }

    let (mut lr, lr_finder) = match cfg.learning_rate {
        LearningRate::Fixed(lr) => (lr, None),
        LearningRate::RangeTest {
            lr_min,
            lr_max,
            steps,
        } => {
            let r = lr_range_test_model(
                params,
                &windows,
                freeze,
                lr_min,
                lr_max,
                steps,
                cfg.batch_examples,
                cfg.seed,
            )?;
            (r.suggestion, Some(r))
        }
    };

    let mut work = params.clone();
    let mut adam = Adam::new(work.named().iter().map(|p| p.tensor));
    let mut acc = GradAccumulator::new(&work);
    let mut smooth = Ema::new(0.9);
    let mut plateau = PlateauDecay::new(cfg.plateau_patience, cfg.plateau_decay);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience.unwrap_or(usize::MAX));
    let initial_dev_loss = mean_token_loss(&work, &dev)?;
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<GptParams> = None;
    let mut best_eval = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    let mut optimizer_step = |work: &mut GptParams,
                              acc: &mut GradAccumulator,
                              adam: &mut Adam,
                              lr: &mut f64,
                              epoch: usize|
     -> Result<()> {
        let loss = acc.mean_loss();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss {loss} at epoch {epoch}, step {}, lr {lr}",
                steps.len() + 1
            )));
        }
        let grads = acc.take_mean();
        apply_update(work, adam, &grads, freeze, *lr)?;
        steps.push(StepRecord {
            step: steps.len() + 1,
            loss,
            lr: *lr,
        });
        *lr *= plateau.observe(smooth.update(loss));
        Ok(())
    };

    for epoch in 0..cfg.max_epochs {
        let order_seed = seed::derive(cfg.seed, &format!("epoch-{epoch}"));
        for batch in bucketed_batches(&windows, cfg.batch_examples, order_seed) {
            for seq in batch.sequences() {
                acc.add_sequence(&work, seq, freeze)?;
            }
            if acc.examples() >= cfg.accumulation_examples {
                optimizer_step(&mut work, &mut acc, &mut adam, &mut lr, epoch)?;
            }
        }
        if !acc.is_empty() {
            optimizer_step(&mut work, &mut acc, &mut adam, &mut lr, epoch)?;
        }
        let loss = mean_token_loss(&work, &dev)?;
        evals.push(EvalRecord {
            epoch: epoch + 1,
            step: adam.steps_taken() as usize,
            loss,
        });
        match stopper.observe(loss) {
            EarlyStop::Improved => {
                best = Some(work.clone());
                best_eval = evals.len() - 1;
            }
            EarlyStop::Continue => {}
            EarlyStop::Stop => {
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let history = TrainHistory {
        steps,
        initial_dev_loss,
        evals,
        lr_finder,
        stop_reason,
        best_eval,
    };
    Ok((best.unwrap_or(work), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn toy_docs() -> Vec<Vec<u32>> {
        (0..6)
            .map(|d| (0..30).map(|i| ((i * 3 + d) % 13) as u32).collect())
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: LearningRate::Fixed(1e-2),
            accumulation_examples: 4,
            window_len: 10,
            batch_examples: 2,
            max_epochs: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn relearn_leaves_frozen_groups_bitwise_equal() {
        let p = init_params(&ModelConfig::new(2, 8, 2, 12, 13, 4)).unwrap();
        let docs = toy_docs();
        let (out, hist) = train(&p, &docs, &docs[..2], &quick_cfg(), &FreezeSpec::relearn()).unwrap();
        assert_ne!(out.token_embedding, p.token_embedding);
        assert_eq!(out.blocks, p.blocks);
        assert_eq!(out.positional_embedding, p.positional_embedding);
        assert_eq!(out.final_ln_gain, p.final_ln_gain);
        assert_eq!(out.final_ln_bias, p.final_ln_bias);
        assert!(!hist.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let p = init_params(&ModelConfig::new(1, 8, 2, 12, 13, 4)).unwrap();
        let docs = toy_docs();
        let a = train(&p, &docs, &docs[..2], &quick_cfg(), &FreezeSpec::full()).unwrap();
        let b = train(&p, &docs, &docs[..2], &quick_cfg(), &FreezeSpec::full()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_aborts() {
        let mut p = init_params(&ModelConfig::new(1, 8, 2, 12, 13, 4)).unwrap();
        p.token_embedding.data_mut()[0] = f64::NAN;
        let docs = toy_docs();
        let err = train(&p, &docs, &docs[..2], &quick_cfg(), &FreezeSpec::full());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn empty_dev_is_rejected() {
        let p = init_params(&ModelConfig::new(1, 8, 2, 12, 13, 4)).unwrap();
        assert!(train(&p, &toy_docs(), &[], &quick_cfg(), &FreezeSpec::full()).is_err());
    }

    #[test]
    fn log_lists_train_and_dev_records() {
        let p = init_params(&ModelConfig::new(1, 8, 2, 12, 13, 4)).unwrap();
        let docs = toy_docs();
        let (_, hist) = train(&p, &docs, &docs[..2], &quick_cfg(), &FreezeSpec::full()).unwrap();
        let mut buf = Vec::new();
        hist.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step\tsplit\tloss\tlr");
        let dev = lines.iter().filter(|l| l.contains("\tdev\t")).count();
        let tr = lines.iter().filter(|l| l.contains("\ttrain\t")).count();
        assert_eq!(dev, hist.evals.len() + 1);
        assert_eq!(tr, hist.steps.len());
    }
}
