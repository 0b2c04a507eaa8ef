//! Shared model vocabulary: architecture and query-wiring enums, the traits
//! training and decoding rely on, and a type-erased [`Model`].

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sample};
use crate::error::{Error, Result};
use crate::rng::Lcg64;
use crate::rnn::{RnnConfig, RnnModel};
use crate::tensor::{Graph, ParamStore, Real, Var};
use crate::transformer::{TransformerConfig, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Rnn,
    Transformer,
}

/// Where the query enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Query ignored.
    Vanilla,
    /// Query-aware encoder only.
    QaEnc,
    /// Query-aware decoder only.
    QaDec,
    /// Both.
    #[default]
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::QaEnc, Variant::QaDec, Variant::Both];

    pub fn query_in_encoder(self) -> bool {
        matches!(self, Variant::QaEnc | Variant::Both)
    }

    pub fn query_in_decoder(self) -> bool {
        matches!(self, Variant::QaDec | Variant::Both)
    }

    pub fn uses_query(self) -> bool {
        self != Variant::Vanilla
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::QaEnc => "qa_enc",
            Variant::QaDec => "qa_dec",
            Variant::Both => "both",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Rnn => "rnn",
            Arch::Transformer => "transformer",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(Arch::Rnn),
            "transformer" => Ok(Arch::Transformer),
            other => Err(Error::Config(format!("unknown arch {other}"))),
        }
    }
}

/// A differentiable sequence-to-sequence model over a parameter store.
pub trait Seq2Seq<F: Real>: Sync {
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
    fn vocab_size(&self) -> usize;

    /// Teacher-forced logits (`M x V`) for one unpadded sample. A dropout
    /// generator switches on training-time dropout where the model has any.
    fn sample_logits(&self, g: &mut Graph<'_, F>, sample: Sample<'_>, dropout: Option<&mut Lcg64>) -> Result<Var>;

    /// Token-mean negative log-likelihood of one sample.
    fn sample_loss(&self, g: &mut Graph<'_, F>, sample: Sample<'_>, dropout: Option<&mut Lcg64>) -> Result<Var> {
        let logits = self.sample_logits(g, sample, dropout)?;
        let active = vec![true; sample.tip_target.len()];
        g.nll_loss(logits, sample.tip_target, &active)
    }
}

/// Batch loss on one graph: per-sample token mean, then mean over the batch.
pub fn forward_loss<F: Real, M: Seq2Seq<F> + ?Sized>(
    g: &mut Graph<'_, F>,
    model: &M,
    batch: &Batch,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        losses.push(model.sample_loss(g, batch.sample(i), None)?);
    }
    g.mean_of(&losses)
}

/// Incremental decoding interface used by greedy and beam search.
pub trait StepScorer {
    type State;

    fn vocab_size(&self) -> usize;

    /// Encodes the source once per record.
    fn start(&self, review: &[usize], query: &[usize]) -> Result<Self::State>;

    /// Next-token logits given the BOS-prefixed prefix.
    fn next_logits(&self, state: &Self::State, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Either model family in training precision.
#[derive(Debug, Clone)]
pub enum Model {
    Transformer(TransformerModel<f32>),
    Rnn(RnnModel<f32>),
}

/// Architecture-specific hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Rnn(RnnConfig),
}

impl ModelConfig {
    pub fn arch(&self) -> Arch {
        match self {
            ModelConfig::Transformer(_) => Arch::Transformer,
            ModelConfig::Rnn(_) => Arch::Rnn,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            ModelConfig::Transformer(c) => c.variant,
            ModelConfig::Rnn(c) => c.variant,
        }
    }
}

pub enum ModelState {
    Transformer(<TransformerModel<f32> as StepScorer>::State),
    Rnn(<RnnModel<f32> as StepScorer>::State),
}

impl Model {
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Transformer(c) => Model::Transformer(TransformerModel::new(c.clone(), vocab_size, seed)?),
            ModelConfig::Rnn(c) => Model::Rnn(RnnModel::new(c.clone(), vocab_size, seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Transformer(m) => ModelConfig::Transformer(m.config().clone()),
            Model::Rnn(m) => ModelConfig::Rnn(m.config().clone()),
        }
    }

    pub fn as_seq2seq(&self) -> &dyn Seq2Seq<f32> {
        match self {
            Model::Transformer(m) => m,
            Model::Rnn(m) => m,
        }
    }

    pub fn as_seq2seq_mut(&mut self) -> &mut dyn Seq2Seq<f32> {
        match self {
            Model::Transformer(m) => m,
            Model::Rnn(m) => m,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        self.as_seq2seq().params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        self.as_seq2seq_mut().params_mut()
    }
}

impl StepScorer for Model {
    type State = ModelState;

    fn vocab_size(&self) -> usize {
        self.as_seq2seq().vocab_size()
    }

    fn start(&self, review: &[usize], query: &[usize]) -> Result<ModelState> {
        Ok(match self {
            Model::Transformer(m) => ModelState::Transformer(m.start(review, query)?),
            Model::Rnn(m) => ModelState::Rnn(m.start(review, query)?),
        })
    }

    fn next_logits(&self, state: &ModelState, prefix: &[usize]) -> Result<Vec<f64>> {
        match (self, state) {
            (Model::Transformer(m), ModelState::Transformer(s)) => m.next_logits(s, prefix),
            (Model::Rnn(m), ModelState::Rnn(s)) => m.next_logits(s, prefix),
            _ => Err(Error::Config("decoder state from a different architecture".into())),
        }
    }
}
