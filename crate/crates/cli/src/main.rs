//! Command-line front end: one subcommand per tool plus the staged pipeline.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lexrecycle::corpus::{
    ingest_and_dedup, make_synthetic_language, SyntheticKind, SyntheticLanguageSpec, SyntheticMapping,
    TokenizedCorpus,
};
use lexrecycle::eval::{corpus_perplexity, intersection_at_k, most_frequent_tokens, nearest_neighbor_alignment};
use lexrecycle::generate::generate;
use lexrecycle::model::{init_params, load_checkpoint, save_checkpoint, FreezeSpec};
use lexrecycle::pipeline::{
    load_permutation, run_pipeline, save_permutation, tokenize, transplant, verify, Lexicon, PipelineConfig, Stage,
    TargetSpec,
};
use lexrecycle::tokenizer::{train_bpe, Vocabulary};
use lexrecycle::training::{lr_range_test_model, make_windows, mean_token_loss, train};
use lexrecycle::transform::save_map;
use lexrecycle::{seed, Error};

/// Declares one optional long flag per config key. Flags override the
/// config file, which overrides the defaults.
macro_rules! settings {
    ($($field:ident: $help:literal),* $(,)?) => {
        #[derive(Args, Debug, Default)]
        struct Settings {
            /// `key = value` file with defaults for every flag below.
            #[arg(long, global = true)]
            config: Option<PathBuf>,
            $(
                #[arg(long, global = true, value_name = "VALUE", help = $help, hide_short_help = true)]
                $field: Option<String>,
            )*
        }

        impl Settings {
            fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

settings!(
    corpus: "Text files, comma separated",
    target: "permutation, reversal:<window> or text:<paths>",
    out_dir: "Pipeline output directory [default: run]",
    seed: "Master seed",
    vocab_size: "Source BPE vocabulary size [default: 512]",
    target_vocab_size: "BPE vocabulary size for a text target",
    dev_fraction: "Share of documents held out for dev [default: 0.05]",
    context_len: "Model context length",
    small_layers: "Small model layers",
    small_d_model: "Small model width",
    small_heads: "Small model attention heads",
    medium_layers: "Medium model layers",
    medium_d_model: "Medium model width",
    medium_heads: "Medium model attention heads",
    window: "Training window in tokens",
    batch: "Examples per range-test step",
    accumulation: "Examples per optimizer step [default: 2000]",
    lr: "Fixed learning rate; skips the range test",
    lr_min: "Range test start rate",
    lr_max: "Range test end rate",
    lr_steps: "Range test steps",
    plateau_patience: "Steps without improvement before the rate decays",
    plateau_decay: "Rate multiplier on a plateau",
    early_stop: "Epochs without dev improvement before stopping, or none",
    max_epochs: "Epoch cap for training and relearning",
    optimize_epochs: "Embedding-only epochs after the transform",
    finetune_lr: "Full fine-tuning learning rate",
    finetune_epochs: "Full fine-tuning epoch cap",
    transform: "lstsq, procrustes or knn:K",
    ridge: "Ridge term for lstsq; trace-scaled by default",
    eval_window: "Perplexity window",
    eval_stride: "Perplexity stride",
    int_k: "Neighbourhood size for Int@k",
    align_top: "Neighbours listed per token in the alignment table",
    beams: "Beams in stochastic beam search",
    top_k: "Top-k cut before sampling",
    top_p: "Nucleus cut before sampling",
    temperature: "Sampling temperature",
    max_tokens: "Generated tokens per sample at most",
    length_filter: "Drop samples shorter than this, or none",
    samples: "Samples written by the generate stage",
);

impl Settings {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "lexrecycle", version, about = "Relearn, transplant and evaluate lexical embeddings of small GPT models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    settings: Settings,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Size {
    Small,
    Medium,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Freeze {
    /// Train every parameter.
    Full,
    /// Train the lexical embedding only.
    Relearn,
}

impl Freeze {
    fn spec(self) -> FreezeSpec {
        match self {
            Freeze::Full => FreezeSpec::full(),
            Freeze::Relearn => FreezeSpec::relearn(),
        }
    }
}

type Split = (Vec<Vec<u32>>, Vec<Vec<u32>>, usize);

/// Training data: a tokenized corpus, or text files with a vocabulary.
#[derive(Args, Debug)]
struct Data {
    /// Tokenized corpus written by `vocab --tokens-out` or `synth-lang`.
    #[arg(long, conflicts_with = "text")]
    data: Option<PathBuf>,
    /// Text files, tokenized with --vocab.
    #[arg(long, num_args = 1.., requires = "vocab")]
    text: Vec<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl Data {
    fn load(&self) -> Result<TokenizedCorpus> {
        if let Some(p) = &self.data {
            return Ok(TokenizedCorpus::load(p)?);
        }
        let Some(v) = &self.vocab else {
            bail!(Error::InvalidArgument("give --data, or --text with --vocab".into()));
        };
        if self.text.is_empty() {
            bail!(Error::InvalidArgument("--vocab needs --text files to tokenize".into()));
        }
        let vocab = Vocabulary::load(v)?;
        Ok(tokenize(&vocab, &ingest_and_dedup(&self.text)?))
    }

    /// Train and dev documents split by `dev_fraction`, plus the model vocabulary size.
    fn split(&self, cfg: &PipelineConfig) -> Result<Split> {
        let t = self.load()?;
        let n = t.documents.len();
        if n < 2 {
            bail!(Error::InvalidArgument(format!("need at least 2 documents, found {n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut seed::derived_rng(cfg.seed, "dev-split"));
        let n_dev = ((cfg.dev_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        let mut dev_ids = order[..n_dev].to_vec();
        dev_ids.sort_unstable();
        let (mut train_docs, mut dev_docs) = (Vec::new(), Vec::new());
        for (i, d) in t.documents.into_iter().enumerate() {
            if dev_ids.binary_search(&i).is_ok() {
                dev_docs.push(d);
            } else {
                train_docs.push(d);
            }
        }
        Ok((train_docs, dev_docs, t.vocab_size))
    }
}

/// How to print token ids: a vocabulary, optionally behind a permutation.
#[derive(Args, Debug)]
struct LexiconArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Permutation file from `synth-lang`; names permuted ids by their source token.
    #[arg(long)]
    permutation: Option<PathBuf>,
}

impl LexiconArgs {
    fn load(&self) -> Result<Lexicon> {
        let vocab = Vocabulary::load(&self.vocab)?;
        let perm = self.permutation.as_deref().map(load_permutation).transpose()?;
        Ok(Lexicon::new(vocab, perm))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a BPE vocabulary on text files (--corpus, --vocab-size).
    Vocab {
        #[arg(long)]
        out: PathBuf,
        /// Also write the deduplicated corpus, tokenized with the new vocabulary.
        #[arg(long)]
        tokens_out: Option<PathBuf>,
    },
    /// Train a freshly initialised model on all parameters.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long, value_enum, default_value = "small")]
        size: Size,
        #[arg(long)]
        out: PathBuf,
        /// Per-step training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Relearn the lexical embedding of a trained model for new data, all
    /// other weights frozen.
    Relearn {
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Keep the current embedding instead of starting from a random one.
        #[arg(long)]
        keep_embedding: bool,
    },
    /// Sweep learning rates and print the loss curve and suggested rate.
    LrFind {
        /// Model to start from; a fresh model of --size otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "small")]
        size: Size,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_enum, default_value = "full")]
        freeze: Freeze,
    },
    /// Map relearned small-model embeddings into a medium model.
    Transform {
        /// Small source-language model (anchor space).
        #[arg(long)]
        small: PathBuf,
        /// Medium source-language model (target space and body).
        #[arg(long)]
        medium: PathBuf,
        /// Small model with relearned target-language embeddings.
        #[arg(long)]
        small_target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to store the fitted linear map (lstsq and procrustes only).
        #[arg(long)]
        map_out: Option<PathBuf>,
        /// Dev data for reporting the initial loss.
        #[command(flatten)]
        data: Data,
    },
    /// Strided perplexity of a model on a tokenized corpus.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: Data,
    },
    /// Int@k between two embedding spaces.
    EvalInt {
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        small_target: PathBuf,
        #[arg(long)]
        medium: PathBuf,
        #[arg(long)]
        medium_target: PathBuf,
    },
    /// Nearest target-language tokens of the most frequent source tokens.
    Align {
        /// Model with source-language embeddings.
        #[arg(long)]
        source_model: PathBuf,
        /// Model with relearned target-language embeddings.
        #[arg(long)]
        target_model: PathBuf,
        /// Source-language corpus used to pick the most frequent tokens.
        #[arg(long)]
        source_data: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        lexicon: LexiconArgs,
        /// Print only the fraction of rows whose best match is the
        /// permuted source token.
        #[arg(long, requires = "permutation")]
        accuracy_only: bool,
    },
    /// Sample text with stochastic beam search.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        lexicon: LexiconArgs,
        /// Text to continue; generation starts from a document boundary otherwise.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Derive a synthetic target language from a tokenized corpus (--target).
    SynthLang {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the permutation (permutation targets only).
        #[arg(long)]
        permutation_out: Option<PathBuf>,
    },
    /// Run stages of the recipe under --out-dir.
    Pipeline {
        /// Comma-separated stages; all of them by default.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        show_config: bool,
    },
    /// Re-hash every artifact listed in the manifests under --out-dir.
    Verify,
}

fn size_config(cfg: &PipelineConfig, size: Size, vocab: usize) -> lexrecycle::model::ModelConfig {
    let s = seed::derive(cfg.seed, "init");
    match size {
        Size::Small => cfg.small_model(vocab, s),
        Size::Medium => cfg.medium_model(vocab, s),
    }
}

fn write_log(path: Option<&Path>, history: &lexrecycle::training::TrainHistory) -> Result<()> {
    if let Some(p) = path {
        let mut f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        history.write_log(&mut f)?;
    }
    Ok(())
}

fn report_history(history: &lexrecycle::training::TrainHistory) {
    if let Some(f) = &history.lr_finder {
        println!("lr_suggestion={}", f.suggestion);
    }
    println!(
        "steps={} initial_dev_loss={:.6} best_dev_loss={:.6}",
        history.steps.len(),
        history.initial_dev_loss,
        history.best_dev_loss()
    );
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.settings.resolve()?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Vocab { out: path, tokens_out } => {
            if cfg.corpus.is_empty() {
                bail!(Error::InvalidArgument("--corpus is required".into()));
            }
            let corpus = ingest_and_dedup(&cfg.corpus)?;
            let texts: Vec<&str> = corpus.texts().collect();
            let vocab = train_bpe(&texts, cfg.vocab_size)?;
            vocab.save(&path)?;
            writeln!(out, "documents={} vocab_size={}", corpus.len(), vocab.size())?;
            if let Some(t) = tokens_out {
                let tok = tokenize(&vocab, &corpus);
                tok.save(&t)?;
                writeln!(out, "tokens={}", tok.num_tokens())?;
            }
        }
        Command::Train { data, size, out: path, log } => {
            let (train_docs, dev_docs, vocab) = data.split(&cfg)?;
            let params = init_params(&size_config(&cfg, size, vocab))?;
            let tc = cfg.train_config(seed::derive(cfg.seed, "train"));
            let (trained, history) = train(&params, &train_docs, &dev_docs, &tc, &FreezeSpec::full())?;
            save_checkpoint(&trained, &path)?;
            write_log(log.as_deref(), &history)?;
            report_history(&history);
        }
        Command::Relearn { init, data, out: path, log, keep_embedding } => {
            let (train_docs, dev_docs, vocab) = data.split(&cfg)?;
            let model = load_checkpoint(&init)?;
            let start = if keep_embedding {
                if model.config().vocab_size != vocab {
                    bail!(Error::InvalidArgument(format!(
                        "model vocabulary {} differs from data vocabulary {vocab}",
                        model.config().vocab_size
                    )));
                }
                model
            } else {
                model.swap_vocabulary(vocab, seed::derive(cfg.seed, "relearn/swap"))?
            };
            let tc = cfg.train_config(seed::derive(cfg.seed, "relearn"));
            let (trained, history) = train(&start, &train_docs, &dev_docs, &tc, &FreezeSpec::relearn())?;
            save_checkpoint(&trained, &path)?;
            write_log(log.as_deref(), &history)?;
            report_history(&history);
        }
        Command::LrFind { init, size, data, freeze } => {
            let (train_docs, _, vocab) = data.split(&cfg)?;
            let params = match init {
                Some(p) => load_checkpoint(&p)?,
                None => init_params(&size_config(&cfg, size, vocab))?,
            };
            let windows = make_windows(&train_docs, cfg.window);
            let r = lr_range_test_model(
                &params,
                &windows,
                &freeze.spec(),
                cfg.lr_min,
                cfg.lr_max,
                cfg.lr_steps,
                cfg.batch,
                seed::derive(cfg.seed, "lr-find"),
            )?;
            writeln!(out, "lr\tloss\tsmoothed")?;
            for ((lr, l), s) in r.lrs.iter().zip(&r.losses).zip(&r.smoothed) {
                writeln!(out, "{lr:.6e}\t{l:.6}\t{s:.6}")?;
            }
            writeln!(out, "suggestion={:.6e}", r.suggestion)?;
        }
        Command::Transform { small, medium, small_target, out: path, map_out, data } => {
            let (small, medium, st) = (load_checkpoint(&small)?, load_checkpoint(&medium)?, load_checkpoint(&small_target)?);
            let (init, map) = transplant(&small, &medium, &st, cfg.transform, cfg.ridge)?;
            save_checkpoint(&init, &path)?;
            if let Some(map) = &map {
                writeln!(out, "method={} residual={:.6e}", cfg.transform, map.residual)?;
                if let Some(p) = map_out {
                    save_map(&p, map)?;
                }
            } else {
                writeln!(out, "method={}", cfg.transform)?;
            }
            if data.data.is_some() || !data.text.is_empty() {
                let docs = data.load()?;
                let loss = mean_token_loss(&init, &make_windows(&docs.documents, cfg.window))?;
                writeln!(out, "initial_loss={loss:.6}")?;
            }
        }
        Command::EvalPpl { model, data } => {
            let m = load_checkpoint(&model)?;
            let docs = data.load()?;
            let window = cfg.eval_window.min(m.config().context_len);
            let r = corpus_perplexity(&m, &docs.documents, window, cfg.eval_stride.min(window))?;
            writeln!(out, "{r}")?;
        }
        Command::EvalInt { small, small_target, medium, medium_target } => {
            let (s, st) = (load_checkpoint(&small)?, load_checkpoint(&small_target)?);
            let (m, mt) = (load_checkpoint(&medium)?, load_checkpoint(&medium_target)?);
            let k = cfg.int_k;
            let v = intersection_at_k(&st.token_embedding, &s.token_embedding, &mt.token_embedding, &m.token_embedding, k)?;
            writeln!(out, "int_at_k k={k} value={v:.6}")?;
        }
        Command::Align { source_model, target_model, source_data, count, lexicon, accuracy_only } => {
            let (s, t) = (load_checkpoint(&source_model)?, load_checkpoint(&target_model)?);
            let docs = TokenizedCorpus::load(&source_data)?;
            let frequent = most_frequent_tokens(&docs.documents, count);
            let table = nearest_neighbor_alignment(&t.token_embedding, &s.token_embedding, &frequent, cfg.align_top)?;
            let lex = lexicon.load()?;
            if accuracy_only {
                let perm = load_permutation(lexicon.permutation.as_deref().expect("required by clap"))?;
                let acc = table.top1_accuracy(|s| perm.get(s as usize).copied().unwrap_or(s));
                writeln!(out, "top1_accuracy={acc:.4}")?;
            } else {
                let v = lex.vocab();
                write!(out, "{}", table.render(|s| v.display_token(s), |t| lex.token_name(t)))?;
            }
        }
        Command::Generate { model, lexicon, prompt } => {
            let m = load_checkpoint(&model)?;
            let lex = lexicon.load()?;
            let eod = (m.config().vocab_size - 1) as u32;
            let prompt_ids = match &prompt {
                Some(p) => Some(encode_prompt(&lex, p)?),
                None => None,
            };
            let base = seed::derive(cfg.seed, "generate");
            for i in 0..cfg.samples {
                let gc = cfg.generation_config(seed::derive(base, &format!("sample-{i}")));
                let g = generate(&m, &gc, prompt_ids.as_deref(), eod)?;
                for seq in &g.kept {
                    let text = lex.decode(&seq.tokens)?.replace(['\n', '\t'], " ");
                    writeln!(out, "{:.4}\t{}{}", seq.score, prompt.as_deref().unwrap_or(""), text)?;
                }
            }
        }
        Command::SynthLang { data, out: path, permutation_out } => {
            let src = TokenizedCorpus::load(&data)?;
            let kind = match cfg.target {
                TargetSpec::Permutation => SyntheticKind::TokenPermutation,
                TargetSpec::Reversal(window) => SyntheticKind::LocalWordReversal { window },
                TargetSpec::Text(_) => bail!(Error::InvalidArgument(
                    "synth-lang needs --target permutation or reversal:<window>".into()
                )),
            };
            let spec = SyntheticLanguageSpec {
                kind,
                seed: seed::derive(cfg.seed, "synth-lang"),
            };
            // The end-of-document id is the last one and stays fixed.
            let (docs, mapping) = make_synthetic_language(&src.documents, src.vocab_size - 1, &spec)?;
            TokenizedCorpus {
                vocab_size: src.vocab_size,
                documents: docs,
            }
            .save(&path)?;
            if let (Some(p), SyntheticMapping::Permutation(perm)) = (permutation_out, &mapping) {
                save_permutation(&p, perm)?;
            }
        }
        Command::Pipeline { stages, show_config } => {
            if show_config {
                write!(out, "{}", cfg.to_text())?;
                return Ok(());
            }
            let stages: Vec<Stage> = if stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                stages.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
            };
            for m in run_pipeline(&cfg, &stages)? {
                for (k, v) in &m.metrics {
                    writeln!(out, "{}\t{k}\t{v}", m.stage)?;
                }
            }
        }
        Command::Verify => {
            let n = verify(&cfg.out_dir)?;
            writeln!(out, "ok: {n} artifacts match their manifests")?;
        }
    }
    Ok(())
}

/// Encodes a prompt in the model's language. With a permutation the text is
/// encoded by the source vocabulary and then relabelled.
fn encode_prompt(lex: &Lexicon, prompt: &str) -> Result<Vec<u32>> {
    let ids = lex.vocab().encode(prompt.as_bytes());
    Ok(match lex {
        Lexicon::Vocab(_) => ids,
        Lexicon::Permuted { inverse, .. } => {
            let mut forward = vec![0u32; inverse.len()];
            for (t, &s) in inverse.iter().enumerate() {
                forward[s as usize] = t as u32;
            }
            ids.into_iter().map(|s| forward.get(s as usize).copied().unwrap_or(s)).collect()
        }
    })
}

/// 1 for usage errors, 2 for dependency, validation and file errors, 3 for
/// numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_config_key_has_a_flag() {
        let cmd = Cli::command();
        for key in PipelineConfig::KEYS {
            assert!(cmd.get_arguments().any(|a| a.get_id() == *key), "{key}");
        }
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "seed = 4\nwindow = 32\n").unwrap();
        let cli = Cli::try_parse_from(["lexrecycle", "verify", "--config", p.to_str().unwrap(), "--window", "16"]).unwrap();
        let cfg = cli.settings.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.window), (4, 16));
    }

    #[test]
    fn numerical_errors_exit_with_three() {
        assert_eq!(exit_code(&anyhow::Error::from(Error::Numerical("nan".into()))), 3);
        assert_eq!(exit_code(&anyhow::Error::from(Error::MissingDependency("x".into()))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }
}
