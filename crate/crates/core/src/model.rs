//! Decoder-only transformer with tied lexical embeddings.
//!
//! Blocks are pre-layernorm (GPT-2 style) with learned absolute positions.
//! The token embedding matrix is the only lexical parameter: it is gathered
//! for the input and multiplied (transposed) against the final hidden states
//! for the output logits.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{seed, Error, Result};

pub const INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 8] = b"LXRCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with the conventional `d_ff = 4 · d_model`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        context_len: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            context_len,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::invalid(format!("zero-sized model dimension in {self}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::invalid("context length must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl fmt::Display for ModelConfig {
    /// `key=value` lines, also the checkpoint header encoding.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_layers={}", self.n_layers)?;
        writeln!(f, "d_model={}", self.d_model)?;
        writeln!(f, "n_heads={}", self.n_heads)?;
        writeln!(f, "d_ff={}", self.d_ff)?;
        writeln!(f, "context_len={}", self.context_len)?;
        writeln!(f, "vocab_size={}", self.vocab_size)?;
        writeln!(f, "seed={}", self.seed)
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let get = |key: &str| -> Result<u64> {
            s.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Format {
                    kind: "model config",
                    detail: format!("missing {key}"),
                })?
                .parse()
                .map_err(|_| Error::Format {
                    kind: "model config",
                    detail: format!("bad value for {key}"),
                })
        };
        let cfg = ModelConfig {
            n_layers: get("n_layers")? as usize,
            d_model: get("d_model")? as usize,
            n_heads: get("n_heads")? as usize,
            d_ff: get("d_ff")? as usize,
            context_len: get("context_len")? as usize,
            vocab_size: get("vocab_size")? as usize,
            seed: get("seed")?,
        };
        Ok(cfg)
    }
}

/// Trainability groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    LexicalEmbedding,
    PositionalEmbedding,
    TransformerLayers,
    FinalLayerNorm,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::LexicalEmbedding,
        ParamGroup::PositionalEmbedding,
        ParamGroup::TransformerLayers,
        ParamGroup::FinalLayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::LexicalEmbedding => "lexical_embedding",
            ParamGroup::PositionalEmbedding => "positional_embedding",
            ParamGroup::TransformerLayers => "transformer_layers",
            ParamGroup::FinalLayerNorm => "final_layernorm",
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group {s:?}")))
    }
}

/// Which parameter groups a training run may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeSpec {
    trainable: BTreeSet<ParamGroup>,
}

impl FreezeSpec {
    pub fn new(trainable: impl IntoIterator<Item = ParamGroup>) -> Result<Self> {
        let trainable: BTreeSet<_> = trainable.into_iter().collect();
        if trainable.is_empty() {
            return Err(Error::invalid("at least one parameter group must be trainable"));
        }
        Ok(FreezeSpec { trainable })
    }

    /// Only the lexical embedding learns; everything else stays frozen.
    pub fn relearn() -> Self {
        FreezeSpec {
            trainable: BTreeSet::from([ParamGroup::LexicalEmbedding]),
        }
    }

    pub fn full() -> Self {
        FreezeSpec {
            trainable: ParamGroup::ALL.into_iter().collect(),
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.trainable.iter().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_query: Tensor,
    pub b_query: Tensor,
    pub w_key: Tensor,
    pub b_key: Tensor,
    pub w_value: Tensor,
    pub b_value: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.query.weight", &self.w_query),
            ("attn.query.bias", &self.b_query),
            ("attn.key.weight", &self.w_key),
            ("attn.key.bias", &self.b_key),
            ("attn.value.weight", &self.w_value),
            ("attn.value.bias", &self.b_value),
            ("attn.out.weight", &self.w_out),
            ("attn.out.bias", &self.b_out),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.fc.weight", &self.w_fc),
            ("mlp.fc.bias", &self.b_fc),
            ("mlp.proj.weight", &self.w_proj),
            ("mlp.proj.bias", &self.b_proj),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_query,
            &mut self.b_query,
            &mut self.w_key,
            &mut self.b_key,
            &mut self.w_value,
            &mut self.b_value,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// All weights of the model together with the config they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct GptParams {
    config: ModelConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
}

/// A parameter tensor with its checkpoint name and group.
pub struct NamedParam<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a Tensor,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("sized")
}

/// Fresh parameters: weights from `N(0, 0.02²)`, biases zero, layer-norm
/// gains one. Deterministic in `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<GptParams> {
    config.validate()?;
    let mut rng = seed::derived_rng(config.seed, "init");
    let d = config.d_model;
    let token_embedding = normal_matrix(config.vocab_size, d, &mut rng);
    let positional_embedding = normal_matrix(config.context_len, d, &mut rng);
    let blocks = (0..config.n_layers)
        .map(|_| Block {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w_query: normal_matrix(d, d, &mut rng),
            b_query: Tensor::zeros(&[d]),
            w_key: normal_matrix(d, d, &mut rng),
            b_key: Tensor::zeros(&[d]),
            w_value: normal_matrix(d, d, &mut rng),
            b_value: Tensor::zeros(&[d]),
            w_out: normal_matrix(d, d, &mut rng),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w_fc: normal_matrix(d, config.d_ff, &mut rng),
            b_fc: Tensor::zeros(&[config.d_ff]),
            w_proj: normal_matrix(config.d_ff, d, &mut rng),
            b_proj: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(GptParams {
        config: config.clone(),
        token_embedding,
        positional_embedding,
        blocks,
        final_ln_gain: Tensor::full(&[d], 1.0),
        final_ln_bias: Tensor::zeros(&[d]),
    })
}

impl GptParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter in a fixed canonical order.
    pub fn named(&self) -> Vec<NamedParam<'_>> {
        let mut out = vec![
            NamedParam {
                name: "token_embedding".into(),
                group: ParamGroup::LexicalEmbedding,
                tensor: &self.token_embedding,
            },
            NamedParam {
                name: "positional_embedding".into(),
                group: ParamGroup::PositionalEmbedding,
                tensor: &self.positional_embedding,
            },
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, tensor) in b.tensors() {
                out.push(NamedParam {
                    name: format!("block.{i}.{name}"),
                    group: ParamGroup::TransformerLayers,
                    tensor,
                });
            }
        }
        out.push(NamedParam {
            name: "final_ln.gain".into(),
            group: ParamGroup::FinalLayerNorm,
            tensor: &self.final_ln_gain,
        });
        out.push(NamedParam {
            name: "final_ln.bias".into(),
            group: ParamGroup::FinalLayerNorm,
            tensor: &self.final_ln_bias,
        });
        out
    }

    /// Mutable access in the same order as [`GptParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = vec![
            (ParamGroup::LexicalEmbedding, &mut self.token_embedding),
            (ParamGroup::PositionalEmbedding, &mut self.positional_embedding),
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut().map(|t| (ParamGroup::TransformerLayers, t)));
        }
        out.push((ParamGroup::FinalLayerNorm, &mut self.final_ln_gain));
        out.push((ParamGroup::FinalLayerNorm, &mut self.final_ln_bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|p| p.tensor.is_finite())
    }

    /// Replaces the lexical embedding with a fresh `N(0, 0.02²)` matrix for a
    /// vocabulary of `new_vocab_size`. Every other tensor is kept as is.
    pub fn swap_vocabulary(&self, new_vocab_size: usize, seed: u64) -> Result<GptParams> {
        if new_vocab_size == 0 {
            return Err(Error::invalid("new vocabulary must not be empty"));
        }
        let mut rng = seed::derived_rng(seed, "swap-vocabulary");
        let emb = normal_matrix(new_vocab_size, self.config.d_model, &mut rng);
        self.with_token_embedding(emb)
    }

    /// Installs `embedding` verbatim as the lexical embedding.
    pub fn with_token_embedding(&self, embedding: Tensor) -> Result<GptParams> {
        if embedding.shape().len() != 2 || embedding.cols() != self.config.d_model {
            return Err(Error::shape(format!(
                "embedding of shape {:?} for d_model {}",
                embedding.shape(),
                self.config.d_model
            )));
        }
        if embedding.rows() == 0 {
            return Err(Error::invalid("new vocabulary must not be empty"));
        }
        let mut out = self.clone();
        out.config.vocab_size = embedding.rows();
        out.token_embedding = embedding;
        Ok(out)
    }
}

/// A recorded forward pass.
pub struct Forward<'a> {
    pub tape: Tape<'a>,
    /// `T × vocab_size` logits.
    pub logits: Var,
    /// Parameter leaves in [`GptParams::named`] order.
    pub params: Vec<Var>,
}

/// Runs the model over `tokens`. Leaves of groups that `freeze` marks
/// trainable require gradients; `None` records a gradient-free pass.
pub fn forward<'a>(
    params: &'a GptParams,
    tokens: &[u32],
    freeze: Option<&FreezeSpec>,
) -> Result<Forward<'a>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .named()
        .into_iter()
        .map(|p| {
            let rg = freeze.is_some_and(|f| f.is_trainable(p.group));
            tape.leaf(p.tensor, rg)
        })
        .collect();
    let logits = forward_on_tape(&mut tape, &params.config, &vars, tokens)?;
    Ok(Forward {
        tape,
        logits,
        params: vars,
    })
}

/// Records the forward graph on an existing tape whose parameter leaves are
/// `vars`, in [`GptParams::named`] order.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    vars: &[Var],
    tokens: &[u32],
) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::invalid("forward needs at least one token"));
    }
    if t > cfg.context_len {
        return Err(Error::invalid(format!(
            "sequence of {t} tokens exceeds context length {}",
            cfg.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if vars.len() != 4 + 16 * cfg.n_layers {
        return Err(Error::shape(format!(
            "{} parameter leaves for {} layers",
            vars.len(),
            cfg.n_layers
        )));
    }

    let (tok, pos) = (vars[0], vars[1]);
    let ids: Vec<usize> = tokens.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..t).collect();
    let te = tape.gather(tok, &ids)?;
    let pe = tape.gather(pos, &positions)?;
    let mut x = tape.add(te, pe)?;

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for (layer, bv) in vars[2..2 + 16 * cfg.n_layers].chunks(16).enumerate() {
        let [ln1g, ln1b, wq, bq, wk, bk, wv, bvv, wo, bo, ln2g, ln2b, wfc, bfc, wpr, bpr] =
            <[Var; 16]>::try_from(bv).map_err(|_| Error::shape(format!("layer {layer}")))?;
        let h = tape.layer_norm(x, ln1g, ln1b)?;
        let q = linear(tape, h, wq, bq)?;
        let k = linear(tape, h, wk, bk)?;
        let v = linear(tape, h, wv, bvv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale);
            let p = tape.causal_softmax(s)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let a = linear(tape, o, wo, bo)?;
        x = tape.add(x, a)?;
        let h2 = tape.layer_norm(x, ln2g, ln2b)?;
        let f = linear(tape, h2, wfc, bfc)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, wpr, bpr)?;
        x = tape.add(x, f)?;
    }
    let n = vars.len();
    let xf = tape.layer_norm(x, vars[n - 2], vars[n - 1])?;
    tape.matmul_t(xf, tok)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Logits without keeping the tape around.
pub fn logits(params: &GptParams, tokens: &[u32]) -> Result<Tensor> {
    let fwd = forward(params, tokens, None)?;
    Ok(fwd.tape.value(fwd.logits).clone())
}

/// Anything that maps a token prefix to next-token logits, one row per
/// position. Evaluation and generation work against this.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    /// `T × vocab_size` logits for `T = tokens.len()`.
    fn logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl CausalLm for GptParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        logits(self, tokens)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

/// Serializes parameters: magic, version, config text, then every tensor
/// (name, shape, `f64` little-endian values) sorted by name.
pub fn checkpoint_bytes(params: &GptParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_parameters() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = params.config.to_string();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    let mut named = params.named();
    named.sort_by(|a, b| a.name.cmp(&b.name));
    put_u32(&mut out, named.len() as u32);
    for p in named {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated { kind: "checkpoint" })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<GptParams> {
    let bad = |detail: String| Error::Format {
        kind: "checkpoint",
        detail,
    };
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(|_| bad("missing magic".into()))? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found: version.to_string(),
        });
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("config is not UTF-8".into()))?;
    let config: ModelConfig = text.parse()?;
    config.validate()?;
    let mut params = init_shapes(&config);
    let count = r.u32()? as usize;
    let mut expected = params.named();
    expected.sort_by(|a, b| a.name.cmp(&b.name));
    if count != expected.len() {
        return Err(Error::shape(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let order: Vec<(String, Vec<usize>)> = expected
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in order {
        let n = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(n)?).map_err(|_| bad("tensor name".into()))?;
        if got != name {
            return Err(bad(format!("expected tensor {name}, found {got}")));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::shape(format!(
                "tensor {name} has shape {dims:?}, config implies {shape:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes".into()));
    }
    // Map sorted names back onto the canonical order.
    let names: Vec<String> = params.named().into_iter().map(|p| p.name).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let idx = loaded
            .iter()
            .position(|(n, _)| n == name)
            .expect("every name was read");
        *slot.1 = std::mem::replace(&mut loaded[idx].1, Tensor::zeros(&[0]));
    }
    Ok(params)
}

fn init_shapes(config: &ModelConfig) -> GptParams {
    let d = config.d_model;
    let z = |r: usize, c: usize| Tensor::zeros(&[r, c]);
    let v = |n: usize| Tensor::zeros(&[n]);
    GptParams {
        config: config.clone(),
        token_embedding: z(config.vocab_size, d),
        positional_embedding: z(config.context_len, d),
        blocks: (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: v(d),
                ln1_bias: v(d),
                w_query: z(d, d),
                b_query: v(d),
                w_key: z(d, d),
                b_key: v(d),
                w_value: z(d, d),
                b_value: v(d),
                w_out: z(d, d),
                b_out: v(d),
                ln2_gain: v(d),
                ln2_bias: v(d),
                w_fc: z(d, config.d_ff),
                b_fc: v(config.d_ff),
                w_proj: z(config.d_ff, d),
                b_proj: v(d),
            })
            .collect(),
        final_ln_gain: v(d),
        final_ln_bias: v(d),
    }
}

pub fn save_checkpoint(params: &GptParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(params))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GptParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&buf)
}

/// Loads a checkpoint and checks it was built for `vocab_size` tokens.
pub fn load_checkpoint_expecting(path: &Path, vocab_size: usize) -> Result<GptParams> {
    let params = load_checkpoint(path)?;
    if params.config.vocab_size != vocab_size {
        return Err(Error::shape(format!(
            "{} has vocabulary {}, expected {vocab_size}",
            path.display(),
            params.config.vocab_size
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig::new(layers, 8, 2, 8, 11, 3)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(2)).unwrap();
        let b = init_params(&tiny(2)).unwrap();
        assert_eq!(a, b);
        let mut other = tiny(2);
        other.seed = 4;
        assert_ne!(a, init_params(&other).unwrap());
    }

    #[test]
    fn init_norm_parameters() {
        let p = init_params(&tiny(2)).unwrap();
        for b in &p.blocks {
            assert!(b.ln1_gain.data().iter().all(|&v| v == 1.0));
            assert!(b.ln2_gain.data().iter().all(|&v| v == 1.0));
            assert!(b.ln1_bias.data().iter().all(|&v| v == 0.0));
            assert!(b.b_fc.data().iter().all(|&v| v == 0.0));
        }
        assert!(p.final_ln_gain.data().iter().all(|&v| v == 1.0));
        assert!(p.final_ln_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_mean_is_near_zero() {
        let cfg = ModelConfig::new(0, 64, 1, 4, 512, 9);
        let p = init_params(&cfg).unwrap();
        let n = p.token_embedding.len() as f64;
        let mean = p.token_embedding.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt());
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny(1);
        c.n_heads = 3;
        assert!(init_params(&c).is_err());
        let mut c = tiny(1);
        c.context_len = 1;
        assert!(init_params(&c).is_err());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_params(&tiny(1)).unwrap();
        assert!(forward(&p, &[0; 9], None).is_err());
        assert!(forward(&p, &[11], None).is_err());
        assert!(forward(&p, &[], None).is_err());
    }

    #[test]
    fn appending_tokens_keeps_earlier_logits() {
        let p = init_params(&tiny(2)).unwrap();
        let short = logits(&p, &[1, 4, 2]).unwrap();
        let long = logits(&p, &[1, 4, 2, 7, 0]).unwrap();
        for r in 0..3 {
            assert_eq!(short.row(r), long.row(r));
        }
    }

    #[test]
    fn zero_layer_logits_by_hand() {
        // vocab 4, d 2: logits_t = layernorm(E[tok_t] + P[t]) · Eᵀ
        let cfg = ModelConfig::new(0, 2, 1, 3, 4, 0);
        let mut p = init_params(&cfg).unwrap();
        p.token_embedding =
            Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 2.0, 0.5, 0.5]).unwrap();
        p.positional_embedding =
            Tensor::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, -1.0, 0.25, 0.0]).unwrap();
        let got = logits(&p, &[2, 0, 3]).unwrap();
        // Layer norm of a 2-vector (a, b) is (±1, ∓1)·|a−b|/sqrt((a−b)² + 4·eps).
        let ln = |a: f64, b: f64| {
            let h = (a - b) / 2.0;
            let s = (h * h + 1e-5).sqrt();
            [h / s, -h / s]
        };
        let inputs = [(-1.0, 2.0), (2.0, -1.0), (0.75, 0.5)];
        for (t, (a, b)) in inputs.into_iter().enumerate() {
            let h = ln(a, b);
            for v in 0..4 {
                let e = p.token_embedding.row(v);
                let want = h[0] * e[0] + h[1] * e[1];
                assert!((got.get(t, v) - want).abs() < 1e-12, "t={t} v={v}");
            }
        }
    }

    #[test]
    fn swap_keeps_everything_else() {
        let p = init_params(&tiny(2)).unwrap();
        let s = p.swap_vocabulary(20, 5).unwrap();
        assert_eq!(s.token_embedding.shape(), &[20, 8]);
        assert_eq!(s.config().vocab_size, 20);
        assert_eq!(s.blocks, p.blocks);
        assert_eq!(s.positional_embedding, p.positional_embedding);
        assert_eq!(s.final_ln_gain, p.final_ln_gain);
        assert_eq!(s, p.swap_vocabulary(20, 5).unwrap());

        let m = Tensor::full(&[5, 8], 0.5);
        let s = p.with_token_embedding(m.clone()).unwrap();
        assert_eq!(s.token_embedding, m);
        assert!(p.with_token_embedding(Tensor::zeros(&[5, 7])).is_err());
        assert!(p.swap_vocabulary(0, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = init_params(&tiny(2)).unwrap();
        let bytes = checkpoint_bytes(&p);
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), p);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&corrupt),
            Err(Error::Format { .. })
        ));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&version),
            Err(Error::Version { .. })
        ));
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn checkpoint_vocab_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(&ModelConfig::new(1, 8, 2, 8, 512, 0)).unwrap();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint_expecting(&path, 512).unwrap(), p);
        assert!(matches!(
            load_checkpoint_expecting(&path, 300),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn freeze_spec_needs_a_group() {
        assert!(FreezeSpec::new([]).is_err());
        let r = FreezeSpec::relearn();
        assert!(r.is_trainable(ParamGroup::LexicalEmbedding));
        assert!(!r.is_trainable(ParamGroup::PositionalEmbedding));
        assert!(!r.is_trainable(ParamGroup::TransformerLayers));
        assert!(!r.is_trainable(ParamGroup::FinalLayerNorm));
    }
}
