//! Query-conditioned tip generation.
//!
//! The crate bundles everything needed to train and evaluate query-aware
//! sequence-to-sequence models that distill a short tip from a review:
//!
//! - [`corpus`]: tokenization, vocabularies, JSONL triplet loading, splits and batching.
//! - [`tensor`]: a small reverse-mode autodiff engine with the Adam optimizer.
//! - [`attention`]: scaled dot-product and multi-head attention.
//! - [`transformer`] and [`rnn`]: the two model families, each with four
//!   query wirings ([`Variant`]).
//! - [`generation`]: greedy and beam-search decoding.
//! - [`baselines`]: extractive Query_LEAD, BM25 and embedding baselines.
//! - [`evaluation`]: Semantic, Lexicon and BLEU metrics.

pub mod attention;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod rnn;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use corpus::{Batch, DatasetSplit, RawRecord, TokenizeMode, Triplet, Vocabulary};
pub use error::{Error, Result};
pub use evaluation::{EmbeddingTable, MetricReport};
pub use generation::{BeamConfig, Hypothesis};
pub use model::{Arch, Model, Variant};
pub use rnn::{RnnConfig, RnnModel};
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
pub use transformer::{TransformerConfig, TransformerModel};
