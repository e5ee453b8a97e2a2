//! Text ingestion, exact-sentence deduplication, dev splits, the tokenized
//! corpus file format and synthetic target languages.

mod synthetic;
pub mod toy;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use synthetic::{make_synthetic_language, SyntheticKind, SyntheticLanguageSpec, SyntheticMapping};

use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    /// Where the document came from (usually the file path).
    pub source: String,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn from_texts<S: AsRef<str>>(source: &str, texts: &[S]) -> Self {
        Corpus {
            documents: texts
                .iter()
                .map(|t| Document {
                    source: source.to_string(),
                    text: t.as_ref().to_string(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.text.as_str())
    }

    /// Keeps the first occurrence of every sentence (byte-exact) across the
    /// whole corpus and drops documents that end up empty.
    pub fn dedup(&self) -> Corpus {
        let mut seen: HashSet<&str> = HashSet::new();
        let mut documents = Vec::new();
        for doc in &self.documents {
            let mut text = String::with_capacity(doc.text.len());
            for (sentence, sep) in split_sentences(&doc.text) {
                if seen.insert(sentence) {
                    text.push_str(sentence);
                    text.push_str(sep);
                }
            }
            let text = text.trim_end();
            if !text.is_empty() {
                documents.push(Document {
                    source: doc.source.clone(),
                    text: text.to_string(),
                });
            }
        }
        Corpus { documents }
    }
}

fn is_ws(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Splits a document into `(sentence, separator)` pairs. A sentence ends at a
/// newline or at `.`, `!` or `?` followed by whitespace; the separator is the
/// whitespace run that follows.
pub fn split_sentences(doc: &str) -> Vec<(&str, &str)> {
    let b = doc.as_bytes();
    let n = b.len();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        let end = if b[i] == b'\n' {
            Some(i)
        } else if matches!(b[i], b'.' | b'!' | b'?') && i + 1 < n && is_ws(b[i + 1]) {
            Some(i + 1)
        } else {
            None
        };
        match end {
            Some(end) => {
                let mut j = end;
                while j < n && is_ws(b[j]) {
                    j += 1;
                }
                if end > start {
                    out.push((&doc[start..end], &doc[end..j]));
                }
                start = j;
                i = j;
            }
            None => i += 1,
        }
    }
    if start < n {
        out.push((&doc[start..], ""));
    }
    out
}

/// Documents of a file: blocks separated by one or more blank lines, trimmed.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.trim().is_empty() {
                docs.push(current.trim().to_string());
            }
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        docs.push(current.trim().to_string());
    }
    docs
}

/// Reads UTF-8 text files (in sorted path order) and deduplicates sentences
/// across all of them.
pub fn ingest_and_dedup<P: AsRef<Path>>(paths: &[P]) -> Result<Corpus> {
    let mut sorted: Vec<PathBuf> = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
    sorted.sort();
    let mut corpus = Corpus::default();
    for path in &sorted {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let source = path.display().to_string();
        for doc in split_documents(&text) {
            corpus.documents.push(Document {
                source: source.clone(),
                text: doc,
            });
        }
    }
    Ok(corpus.dedup())
}

/// Document-level split: `ceil(fraction · N)` documents (at least one, at
/// most `N − 1`) go to dev, chosen by a seeded shuffle. Both parts keep the
/// input order.
pub fn split_dev(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("dev fraction {fraction} outside (0, 1)")));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} document(s)")));
    }
    let n_dev = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::derived_rng(seed, "dev-split"));
    let mut dev_idx = idx[..n_dev].to_vec();
    dev_idx.sort_unstable();
    let mut is_dev = vec![false; n];
    for &i in &dev_idx {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Corpus::default(), Corpus::default());
    for (doc, d) in corpus.documents.iter().zip(is_dev) {
        if d { &mut dev } else { &mut train }.documents.push(doc.clone());
    }
    Ok((train, dev))
}

const TOKCORPUS_HEADER: &str = "tokcorpus";

/// Tokenized documents plus the vocabulary size they were encoded with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub vocab_size: usize,
    pub documents: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// `tokcorpus v1 <vocab-size>\n`, then per document a `u32` length and
    /// that many `u32` ids, all little endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{TOKCORPUS_HEADER} v1 {}\n", self.vocab_size).into_bytes();
        for doc in &self.documents {
            out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
            for id in doc {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            kind: "tokenized corpus",
            detail: detail.to_string(),
        };
        let nl = buf
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&buf[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != TOKCORPUS_HEADER {
            return Err(bad("bad header"));
        }
        if parts[1] != "v1" {
            return Err(Error::Version {
                kind: "tokenized corpus",
                found: parts[1].to_string(),
            });
        }
        let vocab_size: usize = parts[2].parse().map_err(|_| bad("bad vocabulary size"))?;
        let mut rest = &buf[nl + 1..];
        let read = |rest: &mut &[u8]| -> Result<u32> {
            if rest.len() < 4 {
                return Err(Error::Truncated {
                    kind: "tokenized corpus",
                });
            }
            let v = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes"));
            *rest = &rest[4..];
            Ok(v)
        };
        let mut documents = Vec::new();
        while !rest.is_empty() {
            let len = read(&mut rest)? as usize;
            let doc = (0..len)
                .map(|_| read(&mut rest))
                .collect::<Result<Vec<u32>>>()?;
            if doc.iter().any(|&id| id as usize >= vocab_size) {
                return Err(bad("token id outside the declared vocabulary"));
            }
            documents.push(doc);
        }
        Ok(TokenizedCorpus {
            vocab_size,
            documents,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
