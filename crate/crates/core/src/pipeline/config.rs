use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::generate::GenerationConfig;
use crate::model::ModelConfig;
use crate::training::{LearningRate, TrainConfig};
use crate::{Error, Result};

/// How the target language of a run is obtained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetSpec {
    /// Token ids of the source corpus relabelled by a seeded bijection.
    Permutation,
    /// Source tokens reversed inside fixed windows.
    Reversal(usize),
    /// A real corpus with its own vocabulary.
    Text(Vec<PathBuf>),
}

impl Display for TargetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetSpec::Permutation => f.write_str("permutation"),
            TargetSpec::Reversal(w) => write!(f, "reversal:{w}"),
            TargetSpec::Text(paths) => {
                f.write_str("text:")?;
                f.write_str(&join_paths(paths))
            }
        }
    }
}

impl FromStr for TargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "permutation" {
            Ok(TargetSpec::Permutation)
        } else if let Some(w) = s.strip_prefix("reversal:") {
            Ok(TargetSpec::Reversal(parse_value("target", w)?))
        } else if let Some(p) = s.strip_prefix("text:") {
            Ok(TargetSpec::Text(split_paths(p)))
        } else {
            Err(Error::invalid(format!(
                "target '{s}' is not one of permutation, reversal:<window>, text:<paths>"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMethod {
    Lstsq,
    Procrustes,
    Knn(usize),
}

impl Display for TransformMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransformMethod::Lstsq => f.write_str("lstsq"),
            TransformMethod::Procrustes => f.write_str("procrustes"),
            TransformMethod::Knn(k) => write!(f, "knn:{k}"),
        }
    }
}

impl FromStr for TransformMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstsq" => Ok(TransformMethod::Lstsq),
            "procrustes" => Ok(TransformMethod::Procrustes),
            _ => match s.strip_prefix("knn:") {
                Some(k) => Ok(TransformMethod::Knn(parse_value("transform", k)?)),
                None => Err(Error::invalid(format!(
                    "transform '{s}' is not one of lstsq, procrustes, knn:<k>"
                ))),
            },
        }
    }
}

fn split_paths(s: &str) -> Vec<PathBuf> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value '{value}' for {key}")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn show_optional(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Every setting of a pipeline run. Readable from a `key = value` file and
/// overridable key by key.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub corpus: Vec<PathBuf>,
    pub target: TargetSpec,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub vocab_size: usize,
    pub target_vocab_size: usize,
    pub dev_fraction: f64,

    pub context_len: usize,
    pub small_layers: usize,
    pub small_d_model: usize,
    pub small_heads: usize,
    pub medium_layers: usize,
    pub medium_d_model: usize,
    pub medium_heads: usize,

    pub window: usize,
    pub batch: usize,
    pub accumulation: usize,
    /// `None` runs the LR range test.
    pub lr: Option<f64>,
    pub lr_min: f64,
    pub lr_max: f64,
    pub lr_steps: usize,
    pub plateau_patience: usize,
    pub plateau_decay: f64,
    pub early_stop: Option<usize>,
    pub max_epochs: usize,
    pub optimize_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,

    pub transform: TransformMethod,
    /// `None` uses the trace-scaled default.
    pub ridge: Option<f64>,

    pub eval_window: usize,
    pub eval_stride: usize,
    pub int_k: usize,
    pub align_top: usize,

    pub beams: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub length_filter: Option<usize>,
    pub samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        PipelineConfig {
            corpus: Vec::new(),
            target: TargetSpec::Permutation,
            out_dir: PathBuf::from("run"),
            seed: 0,
            vocab_size: 512,
            target_vocab_size: 512,
            dev_fraction: 0.05,
            context_len: 128,
            small_layers: 4,
            small_d_model: 64,
            small_heads: 4,
            medium_layers: 6,
            medium_d_model: 96,
            medium_heads: 4,
            window: 128,
            batch: 32,
            accumulation: 2000,
            lr: None,
            lr_min: 1e-6,
            lr_max: 1.0,
            lr_steps: 100,
            plateau_patience: 10,
            plateau_decay: 0.9,
            early_stop: Some(2),
            max_epochs: 20,
            optimize_epochs: 1,
            finetune_lr: 1e-5,
            finetune_epochs: 20,
            transform: TransformMethod::Lstsq,
            ridge: None,
            eval_window: 128,
            eval_stride: 64,
            int_k: 50,
            align_top: 5,
            beams: g.num_beams,
            top_k: g.top_k,
            top_p: g.top_p,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            length_filter: g.length_filter,
            samples: 10,
        }
    }
}

impl PipelineConfig {
    /// Every key accepted by [`PipelineConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "corpus",
        "target",
        "out_dir",
        "seed",
        "vocab_size",
        "target_vocab_size",
        "dev_fraction",
        "context_len",
        "small_layers",
        "small_d_model",
        "small_heads",
        "medium_layers",
        "medium_d_model",
        "medium_heads",
        "window",
        "batch",
        "accumulation",
        "lr",
        "lr_min",
        "lr_max",
        "lr_steps",
        "plateau_patience",
        "plateau_decay",
        "early_stop",
        "max_epochs",
        "optimize_epochs",
        "finetune_lr",
        "finetune_epochs",
        "transform",
        "ridge",
        "eval_window",
        "eval_stride",
        "int_k",
        "align_top",
        "beams",
        "top_k",
        "top_p",
        "temperature",
        "max_tokens",
        "length_filter",
        "samples",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "corpus" => self.corpus = split_paths(v),
            "target" => self.target = v.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse_value(key, v)?,
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "target_vocab_size" => self.target_vocab_size = parse_value(key, v)?,
            "dev_fraction" => self.dev_fraction = parse_value(key, v)?,
            "context_len" => self.context_len = parse_value(key, v)?,
            "small_layers" => self.small_layers = parse_value(key, v)?,
            "small_d_model" => self.small_d_model = parse_value(key, v)?,
            "small_heads" => self.small_heads = parse_value(key, v)?,
            "medium_layers" => self.medium_layers = parse_value(key, v)?,
            "medium_d_model" => self.medium_d_model = parse_value(key, v)?,
            "medium_heads" => self.medium_heads = parse_value(key, v)?,
            "window" => self.window = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "accumulation" => self.accumulation = parse_value(key, v)?,
            "lr" => self.lr = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "lr_min" => self.lr_min = parse_value(key, v)?,
            "lr_max" => self.lr_max = parse_value(key, v)?,
            "lr_steps" => self.lr_steps = parse_value(key, v)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, v)?,
            "plateau_decay" => self.plateau_decay = parse_value(key, v)?,
            "early_stop" => self.early_stop = parse_optional(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "optimize_epochs" => self.optimize_epochs = parse_value(key, v)?,
            "finetune_lr" => self.finetune_lr = parse_value(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse_value(key, v)?,
            "transform" => self.transform = v.parse()?,
            "ridge" => self.ridge = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "eval_window" => self.eval_window = parse_value(key, v)?,
            "eval_stride" => self.eval_stride = parse_value(key, v)?,
            "int_k" => self.int_k = parse_value(key, v)?,
            "align_top" => self.align_top = parse_value(key, v)?,
            "beams" => self.beams = parse_value(key, v)?,
            "top_k" => self.top_k = parse_value(key, v)?,
            "top_p" => self.top_p = parse_value(key, v)?,
            "temperature" => self.temperature = parse_value(key, v)?,
            "max_tokens" => self.max_tokens = parse_value(key, v)?,
            "length_filter" => self.length_filter = parse_optional(key, v)?,
            "samples" => self.samples = parse_value(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = |v: &dyn Display| v.to_string();
        Some(match key {
            "corpus" => join_paths(&self.corpus),
            "target" => s(&self.target),
            "out_dir" => self.out_dir.display().to_string(),
            "seed" => s(&self.seed),
            "vocab_size" => s(&self.vocab_size),
            "target_vocab_size" => s(&self.target_vocab_size),
            "dev_fraction" => s(&self.dev_fraction),
            "context_len" => s(&self.context_len),
            "small_layers" => s(&self.small_layers),
            "small_d_model" => s(&self.small_d_model),
            "small_heads" => s(&self.small_heads),
            "medium_layers" => s(&self.medium_layers),
            "medium_d_model" => s(&self.medium_d_model),
            "medium_heads" => s(&self.medium_heads),
            "window" => s(&self.window),
            "batch" => s(&self.batch),
            "accumulation" => s(&self.accumulation),
            "lr" => self.lr.map_or_else(|| "auto".to_string(), |v| v.to_string()),
            "lr_min" => s(&self.lr_min),
            "lr_max" => s(&self.lr_max),
            "lr_steps" => s(&self.lr_steps),
            "plateau_patience" => s(&self.plateau_patience),
            "plateau_decay" => s(&self.plateau_decay),
            "early_stop" => show_optional(self.early_stop),
            "max_epochs" => s(&self.max_epochs),
            "optimize_epochs" => s(&self.optimize_epochs),
            "finetune_lr" => s(&self.finetune_lr),
            "finetune_epochs" => s(&self.finetune_epochs),
            "transform" => s(&self.transform),
            "ridge" => self.ridge.map_or_else(|| "auto".to_string(), |v| v.to_string()),
            "eval_window" => s(&self.eval_window),
            "eval_stride" => s(&self.eval_stride),
            "int_k" => s(&self.int_k),
            "align_top" => s(&self.align_top),
            "beams" => s(&self.beams),
            "top_k" => s(&self.top_k),
            "top_p" => s(&self.top_p),
            "temperature" => s(&self.temperature),
            "max_tokens" => s(&self.max_tokens),
            "length_filter" => show_optional(self.length_filter),
            "samples" => s(&self.samples),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// `key = value` lines for every key, in [`PipelineConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn small_model(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig::new(self.small_layers, self.small_d_model, self.small_heads, self.context_len, vocab_size, seed)
    }

    pub fn medium_model(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig::new(self.medium_layers, self.medium_d_model, self.medium_heads, self.context_len, vocab_size, seed)
    }

    /// Training settings shared by source training and relearning.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: match self.lr {
                Some(lr) => LearningRate::Fixed(lr),
                None => LearningRate::RangeTest {
                    lr_min: self.lr_min,
                    lr_max: self.lr_max,
                    steps: self.lr_steps,
                },
            },
            accumulation_examples: self.accumulation,
            window_len: self.window,
            batch_examples: self.batch,
            plateau_patience: self.plateau_patience,
            plateau_decay: self.plateau_decay,
            early_stop_patience: self.early_stop,
            max_epochs: self.max_epochs,
            seed,
        }
    }

    pub fn generation_config(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            num_beams: self.beams,
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            length_filter: self.length_filter,
            seed,
            ..GenerationConfig::default()
        }
    }
}
