//! Relearning and transplanting the lexical embeddings of small GPT-style
//! language models.
//!
//! The crate covers the whole workflow on a desk-scale model:
//!
//! - [`tokenizer`]: byte-level BPE training, encoding and decoding.
//! - [`autodiff`]: a small reverse-mode differentiation tape over dense matrices.
//! - [`model`]: a decoder-only transformer with tied input/output embeddings.
//! - [`training`]: windowing, bucketed batches, Adam, LR range test and the
//!   freeze-aware training loop.
//! - [`transform`]: least-squares, orthogonal Procrustes and k-NN maps between
//!   embedding spaces of different widths.
//! - [`eval`]: strided perplexity, nearest-neighbour intersection and
//!   alignment tables.
//! - [`generate`]: stochastic beam search with temperature, top-k and nucleus
//!   filtering.
//! - [`corpus`]: ingestion, sentence deduplication, dev splits and synthetic
//!   target languages.
//! - [`pipeline`]: the staged end-to-end recipe with manifests and digests.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generate;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tokenizer;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
