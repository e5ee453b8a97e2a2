//! Byte-level BPE.
//!
//! The first 256 ids are the single bytes, so every byte string can be
//! encoded. Merges are learned over whitespace-delimited pre-tokens and
//! never cross a whitespace boundary; a single space in front of a word is
//! kept with that word.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

const HEADER: &str = "bpe-vocab";
const VERSION: &str = "v1";

/// Token inventory plus the ordered merge rules that built it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Vocabulary {
    /// The 256 single-byte tokens and no merges.
    pub fn bytes_only() -> Self {
        Vocabulary {
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        self.ranks.insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        self.tokens.push(bytes);
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Id of the end-of-document marker, one past the last real token.
    pub fn eod_id(&self) -> u32 {
        self.tokens.len() as u32
    }

    /// Vocabulary size a model needs to also predict the end-of-document id.
    pub fn model_vocab_size(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Human readable form of a token, with the end-of-document id rendered
    /// as `<eod>`.
    pub fn display_token(&self, id: u32) -> String {
        match self.token_bytes(id) {
            Some(b) => String::from_utf8_lossy(b).into_owned(),
            None if id == self.eod_id() => "<eod>".to_string(),
            None => format!("<{id}?>"),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        for piece in pretokenize(text) {
            let ids = cache
                .entry(piece)
                .or_insert_with(|| self.encode_piece(piece));
            out.extend_from_slice(ids);
        }
        out
    }

    fn encode_piece(&self, piece: &[u8]) -> Vec<u32> {
        let mut symbols: Vec<u32> = piece.iter().map(|&b| b as u32).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank as usize];
            symbols = apply_merge(&symbols, l, r, 256 + rank);
        }
        symbols
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or_else(|| {
                Error::invalid(format!("token id {id} outside vocabulary of {}", self.size()))
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.tokens.len() * 12);
        let _ = writeln!(s, "{HEADER} {VERSION} {}", self.tokens.len());
        for (id, bytes) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{}", hex::encode(bytes));
        }
        s.push_str("#merges\n");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l}\t{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "vocabulary",
            detail,
        };
        let mut lines = text.split_terminator('\n');
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != HEADER {
            return Err(bad(format!("bad header {header:?}")));
        }
        if parts[1] != VERSION {
            return Err(Error::Version {
                kind: "vocabulary",
                found: parts[1].to_string(),
            });
        }
        let size: usize = parts[2]
            .parse()
            .map_err(|_| bad(format!("bad size {:?}", parts[2])))?;
        if size < 256 {
            return Err(bad(format!("size {size} below 256")));
        }
        let mut tokens = Vec::with_capacity(size);
        for id in 0..size {
            let line = lines.next().ok_or(Error::Truncated { kind: "vocabulary" })?;
            let (i, h) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad token line {line:?}")))?;
            if i != id.to_string() {
                return Err(bad(format!("expected id {id}, found {i:?}")));
            }
            let bytes = hex::decode(h).map_err(|e| bad(format!("token {id}: {e}")))?;
            if hex::encode(&bytes) != h {
                return Err(bad(format!("token {id}: non-canonical hex")));
            }
            tokens.push(bytes);
        }
        if lines.next() != Some("#merges") {
            return Err(bad("missing #merges marker".into()));
        }
        let mut vocab = Vocabulary::bytes_only();
        for (b, tok) in tokens.iter().take(256).enumerate() {
            if tok.as_slice() != [b as u8] {
                return Err(bad(format!("token {b} is not the single byte {b:#04x}")));
            }
        }
        for line in lines {
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad merge line {line:?}")))?;
            let parse = |s: &str| -> Result<u32> {
                let v: u32 = s.parse().map_err(|_| bad(format!("bad merge id {s:?}")))?;
                if v.to_string() != s {
                    return Err(bad(format!("non-canonical merge id {s:?}")));
                }
                Ok(v)
            };
            let (l, r) = (parse(l)?, parse(r)?);
            let next = vocab.size() as u32;
            if l >= next || r >= next {
                return Err(bad(format!("merge ({l}, {r}) references a later id")));
            }
            vocab.push_merge(l, r);
        }
        if vocab.size() != size {
            return Err(bad(format!(
                "{} merges for a vocabulary of {size}",
                vocab.merges.len()
            )));
        }
        if vocab.tokens != tokens {
            return Err(bad("token bytes disagree with the merge list".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn apply_merge(symbols: &[u32], l: u32, r: u32, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(new);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Splits text into pre-tokens: runs of non-whitespace (optionally led by a
/// single space) and runs of whitespace.
pub fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let n = text.len();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < n {
        let mut start = i;
        if is_ws(text[i]) {
            let mut j = i;
            while j < n && is_ws(text[j]) {
                j += 1;
            }
            if j < n && text[j - 1] == b' ' {
                if j - 1 > i {
                    pieces.push(&text[i..j - 1]);
                }
                start = j - 1;
                i = j;
            } else {
                pieces.push(&text[i..j]);
                i = j;
                continue;
            }
        }
        while i < n && !is_ws(text[i]) {
            i += 1;
        }
        pieces.push(&text[start..i]);
    }
    pieces
}

/// Learns merges until the vocabulary has `target_size` tokens or no
/// adjacent pair is left.
///
/// The most frequent pair wins; ties go to the pair whose concatenated bytes
/// sort first, then to the shorter left side.
pub fn train_bpe<S: AsRef<[u8]>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }
    if target_size < 256 {
        return Err(Error::invalid(format!(
            "target size {target_size} is below the 256 byte tokens"
        )));
    }
    let mut counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    for doc in corpus {
        for piece in pretokenize(doc.as_ref()) {
            *counts.entry(piece).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();

    let mut vocab = Vocabulary::bytes_only();
    while vocab.size() < target_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += c;
            }
        }
        let tokens = &vocab.tokens;
        let key = |p: &(u32, u32)| {
            let (l, r) = (&tokens[p.0 as usize], &tokens[p.1 as usize]);
            let mut cat = l.clone();
            cat.extend_from_slice(r);
            (cat, l.len())
        };
        let best = pairs.into_iter().min_by(|(pa, ca), (pb, cb)| {
            cb.cmp(ca).then_with(|| key(pa).cmp(&key(pb)))
        });
        let Some(((l, r), _)) = best else { break };
        let new = vocab.size() as u32;
        for (syms, _) in &mut words {
            if syms.len() > 1 {
                *syms = apply_merge(syms, l, r, new);
            }
        }
        vocab.push_merge(l, r);
    }
    Ok(vocab)
}
