//! The staged recipe: build a vocabulary, train source models, relearn the
//! small model's embeddings for the target language, transplant them to the
//! medium model, train them further, finetune, evaluate and generate.
//!
//! Every stage reads and writes files under one run directory and leaves a
//! manifest with the digests of what it read and wrote. Stage seeds are
//! derived from the run seed and the stage name, so any stage can be rerun
//! on its own and reproduce its artifacts byte for byte.

mod config;
mod manifest;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use config::{PipelineConfig, TargetSpec, TransformMethod};
pub use manifest::{sha256_file, Manifest, RunLock};

use crate::corpus::{
    ingest_and_dedup, make_synthetic_language, split_dev, Corpus, SyntheticKind, SyntheticLanguageSpec,
    SyntheticMapping, TokenizedCorpus,
};
use crate::eval::{corpus_perplexity, intersection_at_k, most_frequent_tokens, nearest_neighbor_alignment};
use crate::generate::generate;
use crate::model::{init_params, load_checkpoint, save_checkpoint, FreezeSpec, GptParams};
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::training::{make_windows, mean_token_loss, train, LearningRate, TrainConfig, TrainHistory};
use crate::transform::{default_ridge, fit_lstsq, fit_procrustes, knn_transform, save_map, AnchorSet, LinearMap};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Vocab,
    TrainSource,
    Relearn,
    Transform,
    OptimizeEmbeddings,
    Finetune,
    Eval,
    Generate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Vocab,
        Stage::TrainSource,
        Stage::Relearn,
        Stage::Transform,
        Stage::OptimizeEmbeddings,
        Stage::Finetune,
        Stage::Eval,
        Stage::Generate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vocab => "vocab",
            Stage::TrainSource => "train-source",
            Stage::Relearn => "relearn",
            Stage::Transform => "transform",
            Stage::OptimizeEmbeddings => "optimize-embeddings",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Generate => "generate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage '{s}'")))
    }
}

/// Paths of every artifact, relative to the run directory.
pub mod artifacts {
    pub const VOCAB: &str = "vocab.bpe";
    pub const TARGET_VOCAB: &str = "target.bpe";
    pub const PERMUTATION: &str = "synthetic.perm";
    pub const SOURCE_TRAIN: &str = "corpus/source.train.tok";
    pub const SOURCE_DEV: &str = "corpus/source.dev.tok";
    pub const TARGET_TRAIN: &str = "corpus/target.train.tok";
    pub const TARGET_DEV: &str = "corpus/target.dev.tok";
    pub const SMALL: &str = "models/small.ckpt";
    pub const MEDIUM: &str = "models/medium.ckpt";
    pub const SMALL_TARGET: &str = "models/small-target.ckpt";
    pub const MEDIUM_TARGET_INIT: &str = "models/medium-target-init.ckpt";
    pub const MEDIUM_TARGET_EMB: &str = "models/medium-target-emb.ckpt";
    pub const MEDIUM_TARGET_FT: &str = "models/medium-target-ft.ckpt";
    pub const TRANSFORM_MAP: &str = "maps/transform.map";
    pub const EVAL: &str = "eval/eval.txt";
    pub const ALIGNMENT: &str = "eval/alignment.tsv";
    pub const GENERATED: &str = "generate/generated.txt";
    pub const MANIFESTS: &str = "manifests";
}

use artifacts as a;

/// Which stage produces an artifact, for dependency messages.
fn producer(rel: &str) -> &'static str {
    match rel {
        a::VOCAB | a::TARGET_VOCAB | a::PERMUTATION | a::SOURCE_TRAIN | a::SOURCE_DEV | a::TARGET_TRAIN
        | a::TARGET_DEV => "vocab",
        a::SMALL | a::MEDIUM => "train-source",
        a::SMALL_TARGET => "relearn",
        a::MEDIUM_TARGET_INIT => "transform",
        a::MEDIUM_TARGET_EMB => "optimize-embeddings",
        a::MEDIUM_TARGET_FT => "finetune",
        _ => "an earlier stage",
    }
}

pub fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(a::MANIFESTS).join(format!("{}.manifest", stage.name()))
}

fn load_manifests(out: &Path) -> Result<Vec<Manifest>> {
    let mut found = Vec::new();
    for st in Stage::ALL {
        let p = manifest_path(out, st);
        if p.exists() {
            found.push(Manifest::load(&p)?);
        }
    }
    Ok(found)
}

/// Token ids as text, for whichever target language the run uses.
pub enum Lexicon {
    Vocab(Vocabulary),
    /// Target ids relabelled from the source vocabulary; `inverse[t]` is the
    /// source id behind target id `t`.
    Permuted { vocab: Vocabulary, inverse: Vec<u32> },
}

impl Lexicon {
    /// `permutation[s]` is the target id of source id `s`.
    pub fn new(vocab: Vocabulary, permutation: Option<Vec<u32>>) -> Self {
        match permutation {
            None => Lexicon::Vocab(vocab),
            Some(perm) => {
                let mut inverse = perm.clone();
                for (s, &t) in perm.iter().enumerate() {
                    if let Some(slot) = inverse.get_mut(t as usize) {
                        *slot = s as u32;
                    }
                }
                Lexicon::Permuted { vocab, inverse }
            }
        }
    }

    fn source_id(&self, id: u32) -> u32 {
        match self {
            Lexicon::Vocab(_) => id,
            Lexicon::Permuted { inverse, .. } => inverse.get(id as usize).copied().unwrap_or(id),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Lexicon::Vocab(v) | Lexicon::Permuted { vocab: v, .. } => v,
        }
    }

    pub fn token_name(&self, id: u32) -> String {
        self.vocab().display_token(self.source_id(id))
    }

    /// Decoded text with end-of-document tokens dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let eod = self.vocab().eod_id();
        let mapped: Vec<u32> = ids.iter().map(|&t| self.source_id(t)).filter(|&t| t != eod).collect();
        Ok(String::from_utf8_lossy(&self.vocab().decode(&mapped)?).into_owned())
    }
}

pub fn save_permutation(path: &Path, perm: &[u32]) -> Result<()> {
    let mut text = format!("perm v1 {}\n", perm.len());
    for p in perm {
        text.push_str(&format!("{p}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_permutation(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::Format {
        kind: "permutation",
        detail: d.to_string(),
    };
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|h| h.strip_prefix("perm v1 "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("bad header"))?;
    let perm: Vec<u32> = lines.map(|l| l.parse().map_err(|_| bad("bad id"))).collect::<Result<_>>()?;
    if perm.len() != n {
        return Err(bad("length differs from header"));
    }
    Ok(perm)
}

pub fn tokenize(vocab: &Vocabulary, corpus: &Corpus) -> TokenizedCorpus {
    let eod = vocab.eod_id();
    TokenizedCorpus {
        vocab_size: vocab.model_vocab_size(),
        documents: corpus
            .texts()
            .map(|t| {
                let mut ids = vocab.encode(t.as_bytes());
                ids.push(eod);
                ids
            })
            .collect(),
    }
}

/// One stage in progress: resolves paths, checks and records digests.
struct StageRun<'a> {
    out: &'a Path,
    produced: HashMap<String, String>,
    manifest: Manifest,
}

impl<'a> StageRun<'a> {
    fn new(out: &'a Path, stage: Stage, cfg: &PipelineConfig) -> Result<Self> {
        let mut produced = HashMap::new();
        for m in load_manifests(out)? {
            if m.stage == stage.name() {
                continue;
            }
            for (p, d) in m.outputs {
                produced.insert(p, d);
            }
        }
        let mut manifest = Manifest::new(stage.name());
        for k in PipelineConfig::KEYS.iter().filter(|&&k| k != "out_dir") {
            manifest.params.push((k.to_string(), cfg.get(k).expect("listed key")));
        }
        Ok(StageRun {
            out,
            produced,
            manifest,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Checks an artifact from an earlier stage against its recorded digest.
    fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingDependency(format!(
                "{} (produced by stage {})",
                p.display(),
                producer(rel)
            )));
        }
        let digest = sha256_file(&p)?;
        if let Some(expected) = self.produced.get(rel) {
            if *expected != digest {
                return Err(Error::DigestMismatch {
                    path: p,
                    expected: expected.clone(),
                    found: digest,
                });
            }
        }
        self.manifest.inputs.push((rel.to_string(), digest));
        Ok(p)
    }

    fn external_input(&mut self, p: &Path) -> Result<()> {
        let digest = sha256_file(p)?;
        self.manifest.inputs.push((p.display().to_string(), digest));
        Ok(())
    }

    fn output_path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn wrote(&mut self, rel: &str) -> Result<()> {
        let digest = sha256_file(&self.path(rel))?;
        self.manifest.outputs.push((rel.to_string(), digest));
        Ok(())
    }

    fn metric(&mut self, name: &str, value: impl fmt::Display) {
        self.manifest.metrics.push((name.to_string(), value.to_string()));
    }

    fn save_checkpoint(&mut self, rel: &str, params: &GptParams) -> Result<()> {
        save_checkpoint(params, &self.output_path(rel)?)?;
        self.wrote(rel)
    }

    fn save_log(&mut self, rel: &str, history: &TrainHistory) -> Result<()> {
        let p = self.output_path(rel)?;
        let mut buf = Vec::new();
        history.write_log(&mut buf).map_err(|e| Error::io(&p, e))?;
        std::fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
        self.wrote(rel)
    }

    fn finish(self, stage: Stage) -> Result<Manifest> {
        let p = manifest_path(self.out, stage);
        std::fs::create_dir_all(p.parent().expect("has parent")).map_err(|e| Error::io(&p, e))?;
        self.manifest.save(&p)?;
        Ok(self.manifest)
    }
}

fn stage_seed(cfg: &PipelineConfig, label: &str) -> u64 {
    seed::derive(cfg.seed, label)
}

/// Runs `stages` in recipe order under an exclusive lock on the run
/// directory and returns their manifests.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &[Stage]) -> Result<Vec<Manifest>> {
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _lock = RunLock::acquire(out)?;
    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    order.into_iter().map(|st| run_stage(cfg, st)).collect()
}

fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Manifest> {
    let out = cfg.out_dir.as_path();
    let mut run = StageRun::new(out, stage, cfg)?;
    match stage {
        Stage::Vocab => stage_vocab(cfg, &mut run)?,
        Stage::TrainSource => stage_train_source(cfg, &mut run)?,
        Stage::Relearn => stage_relearn(cfg, &mut run)?,
        Stage::Transform => stage_transform(cfg, &mut run)?,
        Stage::OptimizeEmbeddings => stage_optimize(cfg, &mut run)?,
        Stage::Finetune => stage_finetune(cfg, &mut run)?,
        Stage::Eval => stage_eval(cfg, &mut run)?,
        Stage::Generate => stage_generate(cfg, &mut run)?,
    }
    run.finish(stage)
}

fn save_tok(run: &mut StageRun<'_>, rel: &str, t: &TokenizedCorpus) -> Result<()> {
    t.save(&run.output_path(rel)?)?;
    run.metric(&format!("{rel}:tokens"), t.num_tokens());
    run.wrote(rel)
}

fn stage_vocab(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    if cfg.corpus.is_empty() {
        return Err(Error::invalid("no corpus files configured"));
    }
    for p in &cfg.corpus {
        if !p.exists() {
            return Err(Error::MissingDependency(format!("corpus file {}", p.display())));
        }
        run.external_input(p)?;
    }
    let corpus = ingest_and_dedup(&cfg.corpus)?;
    let (train_c, dev_c) = split_dev(&corpus, cfg.dev_fraction, stage_seed(cfg, "vocab/split"))?;
    let texts: Vec<&str> = train_c.texts().collect();
    let vocab = train_bpe(&texts, cfg.vocab_size)?;
    vocab.save(&run.output_path(a::VOCAB)?)?;
    run.wrote(a::VOCAB)?;
    run.metric("vocab_size", vocab.size());
    let (src_train, src_dev) = (tokenize(&vocab, &train_c), tokenize(&vocab, &dev_c));
    save_tok(run, a::SOURCE_TRAIN, &src_train)?;
    save_tok(run, a::SOURCE_DEV, &src_dev)?;

    let (tgt_train, tgt_dev) = match &cfg.target {
        TargetSpec::Text(paths) => {
            for p in paths {
                run.external_input(p)?;
            }
            let target = ingest_and_dedup(paths)?;
            let (t, d) = split_dev(&target, cfg.dev_fraction, stage_seed(cfg, "vocab/target-split"))?;
            let texts: Vec<&str> = t.texts().collect();
            let tv = train_bpe(&texts, cfg.target_vocab_size)?;
            tv.save(&run.output_path(a::TARGET_VOCAB)?)?;
            run.wrote(a::TARGET_VOCAB)?;
            (tokenize(&tv, &t), tokenize(&tv, &d))
        }
        synthetic => {
            let kind = match synthetic {
                TargetSpec::Reversal(w) => SyntheticKind::LocalWordReversal { window: *w },
                _ => SyntheticKind::TokenPermutation,
            };
            let spec = SyntheticLanguageSpec {
                kind,
                seed: stage_seed(cfg, "vocab/synthetic"),
            };
            let (t, mapping) = make_synthetic_language(&src_train.documents, vocab.size(), &spec)?;
            let d = mapping.apply(&src_dev.documents);
            if let SyntheticMapping::Permutation(perm) = &mapping {
                save_permutation(&run.output_path(a::PERMUTATION)?, perm)?;
                run.wrote(a::PERMUTATION)?;
            }
            let n = vocab.model_vocab_size();
            (
                TokenizedCorpus {
                    vocab_size: n,
                    documents: t,
                },
                TokenizedCorpus {
                    vocab_size: n,
                    documents: d,
                },
            )
        }
    };
    save_tok(run, a::TARGET_TRAIN, &tgt_train)?;
    save_tok(run, a::TARGET_DEV, &tgt_dev)
}

fn record_history(run: &mut StageRun<'_>, name: &str, history: &TrainHistory) {
    if let Some(f) = &history.lr_finder {
        run.metric(&format!("{name}:lr_suggestion"), f.suggestion);
    }
    run.metric(&format!("{name}:steps"), history.steps.len());
    run.metric(&format!("{name}:initial_dev_loss"), history.initial_dev_loss);
    run.metric(&format!("{name}:best_dev_loss"), history.best_dev_loss());
}

fn stage_train_source(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let train_docs = TokenizedCorpus::load(&run.input(a::SOURCE_TRAIN)?)?;
    let dev_docs = TokenizedCorpus::load(&run.input(a::SOURCE_DEV)?)?;
    let v = train_docs.vocab_size;
    for (name, rel, mc) in [
        ("small", a::SMALL, cfg.small_model(v, stage_seed(cfg, "train-source/small/init"))),
        ("medium", a::MEDIUM, cfg.medium_model(v, stage_seed(cfg, "train-source/medium/init"))),
    ] {
        let params = init_params(&mc)?;
        let tc = cfg.train_config(stage_seed(cfg, &format!("train-source/{name}")));
        let (trained, history) = train(&params, &train_docs.documents, &dev_docs.documents, &tc, &FreezeSpec::full())?;
        run.save_checkpoint(rel, &trained)?;
        run.save_log(&format!("logs/{name}.log"), &history)?;
        record_history(run, name, &history);
    }
    Ok(())
}

fn load_target(run: &mut StageRun<'_>) -> Result<(TokenizedCorpus, TokenizedCorpus)> {
    let t = TokenizedCorpus::load(&run.input(a::TARGET_TRAIN)?)?;
    let d = TokenizedCorpus::load(&run.input(a::TARGET_DEV)?)?;
    Ok((t, d))
}

fn stage_relearn(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let small = load_checkpoint(&run.input(a::SMALL)?)?;
    let (t, d) = load_target(run)?;
    let start = small.swap_vocabulary(t.vocab_size, stage_seed(cfg, "relearn/swap"))?;
    let tc = cfg.train_config(stage_seed(cfg, "relearn"));
    let (trained, history) = train(&start, &t.documents, &d.documents, &tc, &FreezeSpec::relearn())?;
    run.save_checkpoint(a::SMALL_TARGET, &trained)?;
    run.save_log("logs/small-target.log", &history)?;
    record_history(run, "small-target", &history);
    Ok(())
}

/// Maps the relearned small target embeddings into the medium model's
/// space, fitting on the source vocabulary shared by both source models.
pub fn transplant(
    small: &GptParams,
    medium: &GptParams,
    small_target: &GptParams,
    method: TransformMethod,
    ridge: Option<f64>,
) -> Result<(GptParams, Option<LinearMap>)> {
    let anchors = AnchorSet::new(small.token_embedding.clone(), medium.token_embedding.clone())?;
    let (emb, map) = match method {
        TransformMethod::Lstsq => {
            let map = fit_lstsq(&anchors, ridge.unwrap_or_else(|| default_ridge(&anchors)))?;
            (crate::transform::apply_map(&map, &small_target.token_embedding)?, Some(map))
        }
        TransformMethod::Procrustes => {
            let map = fit_procrustes(&anchors, false)?;
            (crate::transform::apply_map(&map, &small_target.token_embedding)?, Some(map))
        }
        TransformMethod::Knn(k) => (knn_transform(&small_target.token_embedding, &anchors, k)?, None),
    };
    Ok((medium.with_token_embedding(emb)?, map))
}

fn stage_transform(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let small = load_checkpoint(&run.input(a::SMALL)?)?;
    let medium = load_checkpoint(&run.input(a::MEDIUM)?)?;
    let small_target = load_checkpoint(&run.input(a::SMALL_TARGET)?)?;
    let (_, dev) = load_target(run)?;
    let (init, map) = transplant(&small, &medium, &small_target, cfg.transform, cfg.ridge)?;
    run.save_checkpoint(a::MEDIUM_TARGET_INIT, &init)?;
    if let Some(map) = &map {
        save_map(&run.output_path(a::TRANSFORM_MAP)?, map)?;
        run.wrote(a::TRANSFORM_MAP)?;
        run.metric("residual", map.residual);
    }
    let windows = make_windows(&dev.documents, cfg.window);
    run.metric("initial_dev_loss", mean_token_loss(&init, &windows)?);
    Ok(())
}

fn stage_optimize(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let init = load_checkpoint(&run.input(a::MEDIUM_TARGET_INIT)?)?;
    let (t, d) = load_target(run)?;
    let tc = TrainConfig {
        max_epochs: cfg.optimize_epochs,
        early_stop_patience: None,
        ..cfg.train_config(stage_seed(cfg, "optimize-embeddings"))
    };
    let (trained, history) = train(&init, &t.documents, &d.documents, &tc, &FreezeSpec::relearn())?;
    run.save_checkpoint(a::MEDIUM_TARGET_EMB, &trained)?;
    run.save_log("logs/medium-target-emb.log", &history)?;
    record_history(run, "medium-target-emb", &history);
    Ok(())
}

fn stage_finetune(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let start = load_checkpoint(&run.input(a::MEDIUM_TARGET_EMB)?)?;
    let (t, d) = load_target(run)?;
    let tc = TrainConfig {
        learning_rate: LearningRate::Fixed(cfg.finetune_lr),
        window_len: cfg.context_len,
        max_epochs: cfg.finetune_epochs,
        ..cfg.train_config(stage_seed(cfg, "finetune"))
    };
    let (trained, history) = train(&start, &t.documents, &d.documents, &tc, &FreezeSpec::full())?;
    run.save_checkpoint(a::MEDIUM_TARGET_FT, &trained)?;
    run.save_log("logs/medium-target-ft.log", &history)?;
    record_history(run, "medium-target-ft", &history);
    Ok(())
}

fn target_lexicon(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<Lexicon> {
    Ok(match &cfg.target {
        TargetSpec::Text(_) => Lexicon::Vocab(Vocabulary::load(&run.input(a::TARGET_VOCAB)?)?),
        TargetSpec::Reversal(_) => Lexicon::Vocab(Vocabulary::load(&run.input(a::VOCAB)?)?),
        TargetSpec::Permutation => {
            let vocab = Vocabulary::load(&run.input(a::VOCAB)?)?;
            let perm = load_permutation(&run.input(a::PERMUTATION)?)?;
            Lexicon::new(vocab, Some(perm))
        }
    })
}

const TARGET_MODELS: [(&str, &str); 4] = [
    ("small-target", a::SMALL_TARGET),
    ("medium-target-init", a::MEDIUM_TARGET_INIT),
    ("medium-target-emb", a::MEDIUM_TARGET_EMB),
    ("medium-target-ft", a::MEDIUM_TARGET_FT),
];

fn stage_eval(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let mut records = String::new();
    let mut ppl = |run: &mut StageRun<'_>, name: &str, model: &GptParams, docs: &TokenizedCorpus, split: &str| {
        let window = cfg.eval_window.min(model.config().context_len);
        let stride = cfg.eval_stride.min(window);
        let r = corpus_perplexity(model, &docs.documents, window, stride)?;
        records.push_str(&format!("model={name} split={split} {r}\n"));
        run.metric(&format!("perplexity:{name}"), r.perplexity);
        Ok::<(), Error>(())
    };

    let source_dev = if run.exists(a::SOURCE_DEV) {
        Some(TokenizedCorpus::load(&run.input(a::SOURCE_DEV)?)?)
    } else {
        None
    };
    let mut small = None;
    if let (Some(dev), true) = (&source_dev, run.exists(a::SMALL)) {
        let m = load_checkpoint(&run.input(a::SMALL)?)?;
        ppl(run, "small", &m, dev, "source-dev")?;
        small = Some(m);
    }
    let medium = if run.exists(a::MEDIUM) {
        Some(load_checkpoint(&run.input(a::MEDIUM)?)?)
    } else {
        None
    };

    let target_dev = TokenizedCorpus::load(&run.input(a::TARGET_DEV)?)?;
    let mut models: Vec<(&str, GptParams)> = Vec::new();
    for (name, rel) in TARGET_MODELS {
        if run.exists(rel) {
            models.push((name, load_checkpoint(&run.input(rel)?)?));
        }
    }
    if models.is_empty() {
        return Err(Error::MissingDependency(format!(
            "{} (produced by stage relearn)",
            run.path(a::SMALL_TARGET).display()
        )));
    }
    for (name, m) in &models {
        ppl(run, name, m, &target_dev, "target-dev")?;
    }

    let find = |n: &str| models.iter().find(|(name, _)| *name == n).map(|(_, m)| m);
    let medium_target = find("medium-target-emb").or_else(|| find("medium-target-init"));
    if let (Some(s), Some(md), Some(st), Some(mt)) = (&small, &medium, find("small-target"), medium_target) {
        let k = cfg.int_k.min(s.token_embedding.rows());
        let v = intersection_at_k(&st.token_embedding, &s.token_embedding, &mt.token_embedding, &md.token_embedding, k)?;
        records.push_str(&format!("int_at_k k={k} value={v}\n"));
        run.metric(&format!("int_at_{k}"), v);
    }

    if let (Some(s), Some(st), TargetSpec::Permutation) = (&small, find("small-target"), &cfg.target) {
        let lex = target_lexicon(cfg, run)?;
        let perm = load_permutation(&run.path(a::PERMUTATION))?;
        let train_src = TokenizedCorpus::load(&run.input(a::SOURCE_TRAIN)?)?;
        let frequent = most_frequent_tokens(&train_src.documents, 100);
        let table = nearest_neighbor_alignment(&st.token_embedding, &s.token_embedding, &frequent, cfg.align_top)?;
        let acc = table.top1_accuracy(|t| perm.get(t as usize).copied().unwrap_or(t));
        let rendered = table.render(|t| lex.vocab().display_token(t), |t| lex.token_name(t));
        let p = run.output_path(a::ALIGNMENT)?;
        std::fs::write(&p, rendered).map_err(|e| Error::io(&p, e))?;
        run.wrote(a::ALIGNMENT)?;
        records.push_str(&format!("alignment anchors={} top1_accuracy={acc}\n", frequent.len()));
        run.metric("alignment_top1", acc);
    }

    let p = run.output_path(a::EVAL)?;
    std::fs::write(&p, records).map_err(|e| Error::io(&p, e))?;
    run.wrote(a::EVAL)
}

fn stage_generate(cfg: &PipelineConfig, run: &mut StageRun<'_>) -> Result<()> {
    let (name, rel) = TARGET_MODELS
        .iter()
        .rev()
        .find(|(_, rel)| run.exists(rel))
        .copied()
        .ok_or_else(|| {
            Error::MissingDependency(format!(
                "{} (produced by stage relearn)",
                run.path(a::SMALL_TARGET).display()
            ))
        })?;
    let model = load_checkpoint(&run.input(rel)?)?;
    let lex = target_lexicon(cfg, run)?;
    let eod = (model.config().vocab_size - 1) as u32;
    let base = stage_seed(cfg, "generate");
    let mut lines = String::new();
    let (mut kept, mut filtered) = (0, 0);
    for i in 0..cfg.samples {
        let gc = cfg.generation_config(seed::derive(base, &format!("sample-{i}")));
        let out = generate(&model, &gc, None, eod)?;
        for g in &out.kept {
            let text = lex.decode(&g.tokens)?.replace(['\n', '\t'], " ");
            lines.push_str(&format!("{:.6}\t{}\n", g.score, text.trim()));
        }
        kept += out.kept.len();
        filtered += out.filtered.len();
    }
    let p = run.output_path(a::GENERATED)?;
    std::fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
    run.wrote(a::GENERATED)?;
    run.metric("model", name);
    run.metric("kept", kept);
    run.metric("filtered", filtered);
    Ok(())
}

/// Re-hashes every output listed in the run's manifests. Returns the number
/// of files checked.
pub fn verify(out: &Path) -> Result<usize> {
    let manifests = load_manifests(out)?;
    if manifests.is_empty() {
        return Err(Error::MissingDependency(format!("no manifests under {}", out.join(a::MANIFESTS).display())));
    }
    let mut checked = 0;
    for m in manifests {
        for (rel, expected) in &m.outputs {
            let p = out.join(rel);
            if !p.exists() {
                return Err(Error::MissingDependency(format!("{} (listed by stage {})", p.display(), m.stage)));
            }
            let found = sha256_file(&p)?;
            if &found != expected {
                return Err(Error::DigestMismatch {
                    path: p,
                    expected: expected.clone(),
                    found,
                });
            }
            checked += 1;
        }
    }
    Ok(checked)
}
