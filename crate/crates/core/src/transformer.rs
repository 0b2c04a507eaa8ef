//! Query-aware Transformer encoder-decoder.
//!
//! Streams:
//! - `H_q`: review-aware query encoding. Review positions attend over query
//!   tokens, so the result is aligned with the review (`N x d`).
//! - `H_r`: one self-attention block over the review.
//! - encoder memory: `L` encoder layers over `H_r` (vanilla, qa_dec) or over
//!   `[H_q; H_r] W_enc` (qa_enc, both).
//! - decoder keys/values: the memory (vanilla, qa_enc) or
//!   `[H_q; memory] W_dec` (qa_dec, both).
//!
//! All blocks are post-norm: `LN(x + sublayer(x))`.

use serde::{Deserialize, Serialize};

use crate::attention::{self, causal_mask, key_padding_mask, MultiHeadConfig, MultiHeadParams};
use crate::corpus::{Sample, PAD};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, StepScorer, Variant};
use crate::rng::Lcg64;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub variant: Variant,
    /// Reuse the embedding table as the output projection.
    pub tie_output: bool,
    /// Number of stacked review-aware query blocks.
    pub query_block_depth: usize,
    /// Use the same query blocks for the encoder and decoder paths.
    pub share_query_block: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
            variant: Variant::Both,
            tie_output: true,
            query_block_depth: 1,
            share_query_block: true,
        }
    }
}

impl TransformerConfig {
    pub fn small(layers: usize, model_dim: usize, heads: usize, variant: Variant) -> Self {
        Self {
            layers,
            model_dim,
            heads,
            ffn_dim: 4 * model_dim,
            dropout: 0.0,
            variant,
            ..Self::default()
        }
    }

    pub fn attention(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            model_dim: self.model_dim,
            heads: self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.ffn_dim < self.model_dim {
            return Err(Error::Config("ffn_dim must be >= model_dim".into()));
        }
        if self.query_block_depth < 1 {
            return Err(Error::Config("query_block_depth must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize, rng: &mut Lcg64) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), &[1, d], Init::Constant(1.0), rng)?,
            bias: store.add(format!("{prefix}.bias"), &[1, d], Init::Zeros, rng)?,
        })
    }

    fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize, inner: usize, rng: &mut Lcg64) -> Result<Self> {
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), &[d, inner], Init::Glorot, rng)?,
            b1: store.add(format!("{prefix}.b1"), &[1, inner], Init::Zeros, rng)?,
            w2: store.add(format!("{prefix}.w2"), &[inner, d], Init::Glorot, rng)?,
            b2: store.add(format!("{prefix}.b2"), &[1, d], Init::Zeros, rng)?,
        })
    }

    fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }
}

/// Attention sublayer followed by a feed-forward sublayer.
#[derive(Debug, Clone, Copy)]
struct Block {
    attn: MultiHeadParams,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

impl Block {
    fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, c: &TransformerConfig, rng: &mut Lcg64) -> Result<Self> {
        let d = c.model_dim;
        Ok(Self {
            attn: MultiHeadParams::register(store, &format!("{prefix}.attn"), &c.attention(), rng)?,
            norm1: Norm::register(store, &format!("{prefix}.norm1"), d, rng)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), d, c.ffn_dim, rng)?,
            norm2: Norm::register(store, &format!("{prefix}.norm2"), d, rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: MultiHeadParams,
    norm1: Norm,
    cross_attn: MultiHeadParams,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

impl DecoderLayer {
    fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, c: &TransformerConfig, rng: &mut Lcg64) -> Result<Self> {
        let d = c.model_dim;
        let mh = c.attention();
        Ok(Self {
            self_attn: MultiHeadParams::register(store, &format!("{prefix}.self_attn"), &mh, rng)?,
            norm1: Norm::register(store, &format!("{prefix}.norm1"), d, rng)?,
            cross_attn: MultiHeadParams::register(store, &format!("{prefix}.cross_attn"), &mh, rng)?,
            norm2: Norm::register(store, &format!("{prefix}.norm2"), d, rng)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), d, c.ffn_dim, rng)?,
            norm3: Norm::register(store, &format!("{prefix}.norm3"), d, rng)?,
        })
    }
}

/// Everything the decoder needs from the source side.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    /// Output of the encoder stack (`N x d`).
    pub memory: Var,
    /// Review-aware query encoding used on the encoder path, if any.
    pub query: Option<Var>,
    /// Decoder cross-attention keys and values (`N x d`).
    pub cross: Var,
}

/// Sinusoidal position encodings (`len x d`).
pub fn positional_encoding<F: Real>(len: usize, d: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.data_mut()[pos * d + i] = F::of(v);
        }
    }
    t
}

/// `[a; b] W` for `a, b: N x d` and `W: 2d x d`.
pub fn fuse<F: Real>(g: &mut Graph<'_, F>, a: Var, b: Var, w: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "fuse",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    let cat = g.concat_cols(&[a, b])?;
    g.matmul(cat, w)
}

#[derive(Debug, Clone)]
pub struct TransformerModel<F> {
    config: TransformerConfig,
    vocab_size: usize,
    params: ParamStore<F>,
    embed: ParamId,
    query_blocks: Vec<Block>,
    /// Separate query blocks for the decoder path when not shared.
    dec_query_blocks: Option<Vec<Block>>,
    review_block: Block,
    enc_fuse: Option<ParamId>,
    encoder: Vec<Block>,
    dec_fuse: Option<ParamId>,
    decoder: Vec<DecoderLayer>,
    out_proj: Option<ParamId>,
}

struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Lcg64>,
}

impl Dropout<'_> {
    fn apply<F: Real>(&mut self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mut mask = Tensor::zeros(g.shape(x));
        for m in mask.data_mut() {
            if rng.next_f64() < keep {
                *m = F::of(1.0 / keep);
            }
        }
        g.mul_const(x, mask)
    }
}

impl<F: Real> TransformerModel<F> {
    pub fn new(config: TransformerConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary too small: {vocab_size}")));
        }
        let mut rng = Lcg64::new(seed);
        let mut p = ParamStore::new();
        let d = config.model_dim;
        let c = &config;
        let embed = p.add("embed", &[vocab_size, d], Init::Glorot, &mut rng)?;
        let uses_query = c.variant.uses_query();
        let query_blocks = if uses_query {
            (0..c.query_block_depth)
                .map(|i| Block::register(&mut p, &format!("query.{i}"), c, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let dec_query_blocks = if c.variant == Variant::Both && !c.share_query_block {
            Some(
                (0..c.query_block_depth)
                    .map(|i| Block::register(&mut p, &format!("dec_query.{i}"), c, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let review_block = Block::register(&mut p, "review", c, &mut rng)?;
        let enc_fuse = if c.variant.query_in_encoder() {
            Some(p.add("enc_fuse", &[2 * d, d], Init::Glorot, &mut rng)?)
        } else {
            None
        };
        let encoder = (0..c.layers)
            .map(|i| Block::register(&mut p, &format!("encoder.{i}"), c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_fuse = if c.variant.query_in_decoder() {
            Some(p.add("dec_fuse", &[2 * d, d], Init::Glorot, &mut rng)?)
        } else {
            None
        };
        let decoder = (0..c.layers)
            .map(|i| DecoderLayer::register(&mut p, &format!("decoder.{i}"), c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out_proj = if c.tie_output {
            None
        } else {
            Some(p.add("out_proj", &[vocab_size, d], Init::Glorot, &mut rng)?)
        };
        Ok(Self {
            config,
            vocab_size,
            params: p,
            embed,
            query_blocks,
            dec_query_blocks,
            review_block,
            enc_fuse,
            encoder,
            dec_fuse,
            decoder,
            out_proj,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    /// The output projection parameter (the embedding table when tied).
    pub fn output_id(&self) -> ParamId {
        self.out_proj.unwrap_or(self.embed)
    }

    pub fn with_params(mut self, params: ParamStore<F>) -> Result<Self> {
        check_same_layout(&self.params, &params)?;
        self.params = params;
        Ok(self)
    }

    fn dropout<'r>(&self, rng: Option<&'r mut Lcg64>) -> Dropout<'r> {
        Dropout {
            rate: self.config.dropout,
            rng,
        }
    }

    /// Token embeddings plus sinusoidal positions.
    pub fn embed(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embed);
        let e = g.embedding(table, ids)?;
        let pe = g.input(positional_encoding(ids.len(), self.config.model_dim));
        g.add(e, pe)
    }

    fn block(
        &self,
        g: &mut Graph<'_, F>,
        b: &Block,
        q_in: Var,
        kv: Var,
        blocked: Option<&[bool]>,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let a = attention::multi_head(g, &self.config.attention(), &b.attn, q_in, kv, kv, blocked)?;
        let a = drop.apply(g, a)?;
        let x = g.add(q_in, a)?;
        let x = b.norm1.apply(g, x)?;
        let f = b.ffn.apply(g, x)?;
        let f = drop.apply(g, f)?;
        let y = g.add(x, f)?;
        b.norm2.apply(g, y)
    }

    /// Pre-FFN attention output of the first query block: each review row
    /// attends over the (unmasked) query rows.
    pub fn query_attention(
        &self,
        g: &mut Graph<'_, F>,
        e_r: Var,
        e_q: Var,
        query_valid: &[bool],
    ) -> Result<Var> {
        let b = self
            .query_blocks
            .first()
            .ok_or_else(|| Error::Config("vanilla model has no query block".into()))?;
        let mask = key_padding_mask(g.value(e_r).rows(), query_valid);
        attention::multi_head(g, &self.config.attention(), &b.attn, e_r, e_q, e_q, Some(&mask))
    }

    fn query_stack(
        &self,
        g: &mut Graph<'_, F>,
        blocks: &[Block],
        e_r: Var,
        e_q: Var,
        query_valid: &[bool],
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let mask = key_padding_mask(g.value(e_r).rows(), query_valid);
        let mut h = e_r;
        for b in blocks {
            h = self.block(g, b, h, e_q, Some(&mask), drop)?;
        }
        Ok(h)
    }

    /// `H_q` (`N x d`): review positions as queries, query tokens as keys and values.
    pub fn review_aware_query_encode(
        &self,
        g: &mut Graph<'_, F>,
        e_r: Var,
        e_q: Var,
        query_valid: &[bool],
    ) -> Result<Var> {
        self.query_stack(g, &self.query_blocks, e_r, e_q, query_valid, &mut self.dropout(None))
    }

    /// `H_r` (`N x d`): one self-attention block over the review.
    pub fn review_encode(&self, g: &mut Graph<'_, F>, e_r: Var, review_valid: &[bool]) -> Result<Var> {
        self.review_encode_inner(g, e_r, review_valid, &mut self.dropout(None))
    }

    fn review_encode_inner(
        &self,
        g: &mut Graph<'_, F>,
        e_r: Var,
        review_valid: &[bool],
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        if review_valid.iter().all(|&v| !v) {
            return Err(Error::Data("empty review".into()));
        }
        let n = g.value(e_r).rows();
        let mask = key_padding_mask(n, review_valid);
        self.block(g, &self.review_block, e_r, e_r, Some(&mask), drop)
    }

    /// Source side for (possibly PAD-padded) review and query ids.
    pub fn encoder_forward(&self, g: &mut Graph<'_, F>, review: &[usize], query: &[usize]) -> Result<Encoding> {
        self.encode_inner(g, review, query, &mut self.dropout(None))
    }

    fn encode_inner(
        &self,
        g: &mut Graph<'_, F>,
        review: &[usize],
        query: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<Encoding> {
        if review.is_empty() {
            return Err(Error::Data("empty review".into()));
        }
        let review_valid: Vec<bool> = review.iter().map(|&t| t != PAD).collect();
        let e_r = self.embed(g, review)?;
        let e_r = drop.apply(g, e_r)?;
        let h_r = self.review_encode_inner(g, e_r, &review_valid, drop)?;
        let n = review.len();
        let enc_mask = key_padding_mask(n, &review_valid);

        let variant = self.config.variant;
        let query_parts = if variant.uses_query() {
            // An all-PAD query attends to a single PAD embedding.
            let (q_ids, q_valid): (Vec<usize>, Vec<bool>) = if query.iter().all(|&t| t == PAD) {
                (vec![PAD], vec![true])
            } else {
                (query.to_vec(), query.iter().map(|&t| t != PAD).collect())
            };
            let e_q = self.embed(g, &q_ids)?;
            let e_q = drop.apply(g, e_q)?;
            let h_q = self.query_stack(g, &self.query_blocks, e_r, e_q, &q_valid, drop)?;
            let h_q_dec = match &self.dec_query_blocks {
                Some(blocks) => self.query_stack(g, blocks, e_r, e_q, &q_valid, drop)?,
                None => h_q,
            };
            Some((h_q, h_q_dec))
        } else {
            None
        };

        let mut h = match (self.enc_fuse, query_parts) {
            (Some(w), Some((h_q, _))) => {
                let w = g.param(w);
                fuse(g, h_q, h_r, w)?
            }
            _ => h_r,
        };
        for b in &self.encoder {
            h = self.block(g, b, h, h, Some(&enc_mask), drop)?;
        }
        let cross = match (self.dec_fuse, query_parts) {
            (Some(w), Some((_, h_q_dec))) => {
                let w = g.param(w);
                fuse(g, h_q_dec, h, w)?
            }
            _ => h,
        };
        Ok(Encoding {
            memory: h,
            query: query_parts.map(|(q, _)| q),
            cross,
        })
    }

    /// Logits (`M x V`) for a BOS-prefixed tip input, attending over `cross`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<'_, F>,
        cross: Var,
        review_valid: &[bool],
        tip_input: &[usize],
    ) -> Result<Var> {
        self.decode_inner(g, cross, review_valid, tip_input, &mut self.dropout(None))
    }

    fn decode_inner(
        &self,
        g: &mut Graph<'_, F>,
        cross: Var,
        review_valid: &[bool],
        tip_input: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let m = tip_input.len();
        if m == 0 {
            return Err(Error::Data("empty tip input".into()));
        }
        let self_mask = causal_mask(m);
        let cross_mask = key_padding_mask(m, review_valid);
        let mh = self.config.attention();
        let x = self.embed(g, tip_input)?;
        let mut x = drop.apply(g, x)?;
        for layer in &self.decoder {
            let a = attention::multi_head(g, &mh, &layer.self_attn, x, x, x, Some(&self_mask))?;
            let a = drop.apply(g, a)?;
            let s = g.add(x, a)?;
            let s = layer.norm1.apply(g, s)?;
            let c = attention::multi_head(g, &mh, &layer.cross_attn, s, cross, cross, Some(&cross_mask))?;
            let c = drop.apply(g, c)?;
            let t = g.add(s, c)?;
            let t = layer.norm2.apply(g, t)?;
            let f = layer.ffn.apply(g, t)?;
            let f = drop.apply(g, f)?;
            let u = g.add(t, f)?;
            x = layer.norm3.apply(g, u)?;
        }
        let w = g.param(self.output_id());
        g.matmul_t(x, w)
    }
}

pub(crate) fn check_same_layout<F: Real>(a: &ParamStore<F>, b: &ParamStore<F>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "parameter count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b.iter()) {
        if x.name != y.name || x.value.shape() != y.value.shape() {
            return Err(Error::Config(format!(
                "parameter mismatch: {} {:?} vs {} {:?}",
                x.name,
                x.value.shape(),
                y.name,
                y.value.shape()
            )));
        }
    }
    Ok(())
}

impl<F: Real> Seq2Seq<F> for TransformerModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn sample_logits(&self, g: &mut Graph<'_, F>, s: Sample<'_>, dropout: Option<&mut Lcg64>) -> Result<Var> {
        let mut drop = self.dropout(dropout);
        let enc = self.encode_inner(g, s.review, s.query, &mut drop)?;
        let valid: Vec<bool> = s.review.iter().map(|&t| t != PAD).collect();
        self.decode_inner(g, enc.cross, &valid, s.tip_input, &mut drop)
    }
}

/// Cached source side for decoding.
#[derive(Debug, Clone)]
pub struct TransformerState<F> {
    cross: Tensor<F>,
    review_valid: Vec<bool>,
}

impl<F: Real> StepScorer for TransformerModel<F> {
    type State = TransformerState<F>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, review: &[usize], query: &[usize]) -> Result<Self::State> {
        let mut g = Graph::inference(&self.params);
        let enc = self.encoder_forward(&mut g, review, query)?;
        Ok(TransformerState {
            cross: g.value(enc.cross).clone(),
            review_valid: review.iter().map(|&t| t != PAD).collect(),
        })
    }

    fn next_logits(&self, state: &Self::State, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let cross = g.input(state.cross.clone());
        let logits = self.decoder_forward(&mut g, cross, &state.review_valid, prefix)?;
        let t = g.value(logits);
        Ok(t.row_slice(t.rows() - 1).iter().map(|x| x.as_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BOS;

    fn toy(variant: Variant, seed: u64) -> TransformerModel<f64> {
        TransformerModel::new(TransformerConfig::small(2, 8, 2, variant), 11, seed).unwrap()
    }

    fn logits(m: &TransformerModel<f64>, review: &[usize], query: &[usize], tip: &[usize]) -> Tensor<f64> {
        let mut g = Graph::inference(m.params());
        let s = Sample {
            review,
            query,
            tip_input: tip,
            tip_target: tip,
        };
        let l = m.sample_logits(&mut g, s, None).unwrap();
        g.value(l).clone()
    }

    #[test]
    fn fusion_paths_follow_variant() {
        let names = |v| {
            let m = toy(v, 0);
            let has = |n: &str| m.params().id(n).is_some();
            (has("enc_fuse"), has("dec_fuse"), has("query.0.attn.wq"))
        };
        assert_eq!(names(Variant::Vanilla), (false, false, false));
        assert_eq!(names(Variant::QaEnc), (true, false, true));
        assert_eq!(names(Variant::QaDec), (false, true, true));
        assert_eq!(names(Variant::Both), (true, true, true));
    }

    #[test]
    fn logits_shape_and_single_bos() {
        for v in Variant::ALL {
            let m = toy(v, 1);
            let l = logits(&m, &[4, 5, 6], &[7, 8], &[BOS]);
            assert_eq!(l.shape(), &[1, 11]);
            let l = logits(&m, &[4, 5, 6], &[7], &[BOS, 9, 10]);
            assert_eq!(l.shape(), &[3, 11]);
        }
    }

    #[test]
    fn vanilla_ignores_query_and_qa_variants_do_not() {
        let review = [4, 5, 6, 7];
        for v in Variant::ALL {
            let m = toy(v, 3);
            let a = logits(&m, &review, &[8, 9], &[BOS, 4, 5]);
            let b = logits(&m, &review, &[10, 4], &[BOS, 4, 5]);
            let diff = a.max_abs_diff(&b);
            if v == Variant::Vanilla {
                assert_eq!(diff, 0.0);
            } else {
                assert!(diff > 1e-6, "{v}: {diff}");
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = toy(Variant::Both, 4);
        let a = logits(&m, &[4, 5, 6], &[7], &[BOS, 8, 9, 10]);
        let b = logits(&m, &[4, 5, 6], &[7], &[BOS, 8, 4, 5]);
        for t in 0..2 {
            for j in 0..11 {
                assert_eq!(a.get(t, j), b.get(t, j));
            }
        }
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn padding_does_not_move_logits() {
        for v in Variant::ALL {
            let m = toy(v, 5);
            let a = logits(&m, &[4, 5, 6], &[7, 8], &[BOS, 9]);
            let b = logits(&m, &[4, 5, 6, PAD, PAD], &[7, 8, PAD], &[BOS, 9]);
            assert!(a.max_abs_diff(&b) < 1e-5, "{v}");
        }
    }

    #[test]
    fn all_pad_query_is_accepted() {
        let m = toy(Variant::Both, 6);
        let a = logits(&m, &[4, 5], &[], &[BOS]);
        let b = logits(&m, &[4, 5], &[PAD, PAD], &[BOS]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_output_projection_gives_uniform_loss() {
        let cfg = TransformerConfig {
            tie_output: false,
            ..TransformerConfig::small(2, 8, 2, Variant::Both)
        };
        let mut m = TransformerModel::<f64>::new(cfg, 11, 2).unwrap();
        let id = m.output_id();
        m.params_mut().get_mut(id).value.fill(0.0);
        let mut g = Graph::new(m.params());
        let s = Sample {
            review: &[4, 5, 6],
            query: &[7],
            tip_input: &[BOS, 8],
            tip_target: &[8, 2],
        };
        let loss = m.sample_loss(&mut g, s, None).unwrap();
        assert!((g.value(loss).item() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_review_is_an_error() {
        let m = toy(Variant::Vanilla, 0);
        let mut g = Graph::inference(m.params());
        assert!(m.encoder_forward(&mut g, &[], &[4]).is_err());
    }

    #[test]
    fn fuse_selects_halves() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.input(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let top = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let bottom = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let wt = g.input(top);
        let wb = g.input(bottom);
        let fa = fuse(&mut g, a, b, wt).unwrap();
        let fb = fuse(&mut g, a, b, wb).unwrap();
        assert_eq!(g.value(fa), g.value(a));
        assert_eq!(g.value(fb), g.value(b));
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let cfg = TransformerConfig {
            dropout: 0.5,
            ..TransformerConfig::small(1, 8, 2, Variant::Both)
        };
        let m = TransformerModel::<f64>::new(cfg, 11, 0).unwrap();
        let s = Sample {
            review: &[4, 5, 6],
            query: &[7],
            tip_input: &[BOS, 8],
            tip_target: &[8, 2],
        };
        let run = |rng: Option<&mut Lcg64>| {
            let mut g = Graph::inference(m.params());
            let l = m.sample_loss(&mut g, s, rng).unwrap();
            g.value(l).item()
        };
        assert_eq!(run(None), run(None));
        assert_ne!(run(None), run(Some(&mut Lcg64::new(1))));
    }
}
