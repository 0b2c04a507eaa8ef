//! Query-aware LSTM encoder-decoder.
//!
//! Two Bi-LSTMs encode the query (`h_q`) and the review (`H`, `h_r`). In the
//! query-aware encoder a selective gate
//! `g_t = sigmoid(W_r [H_t; h_r] + W_q h_q + b_g)` rescales every review state,
//! `H~_t = g_t * H_t`. The decoder LSTM attends over `H~` with additive
//! attention `softmax(v^T tanh(W_c [H~_i; s_t] + W_q' h_q + b_c))`, where the
//! query term is present only in the query-aware decoder.
//!
//! Row-vector convention throughout: a weight stored as `in x out` maps a
//! `1 x in` row to `1 x out`.

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, PAD};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, StepScorer, Variant};
use crate::rng::Lcg64;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::transformer::check_same_layout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RnnConfig {
    /// Hidden size per direction (`d`). Encoder states are `2d` wide, and so
    /// are the decoder state and the attention space.
    pub hidden: usize,
    pub embed: usize,
    pub variant: Variant,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            embed: 128,
            variant: Variant::Both,
        }
    }
}

impl RnnConfig {
    pub fn small(hidden: usize, embed: usize, variant: Variant) -> Self {
        Self { hidden, embed, variant }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::Config("hidden and embed must be >= 1".into()));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate blocks are ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, input: usize, hidden: usize, rng: &mut Lcg64) -> Result<Self> {
        let w_ih = store.add(format!("{prefix}.w_ih"), &[input, 4 * hidden], Init::Glorot, rng)?;
        let w_hh = store.add(format!("{prefix}.w_hh"), &[hidden, 4 * hidden], Init::Glorot, rng)?;
        let bias = store.add(format!("{prefix}.bias"), &[1, 4 * hidden], Init::Zeros, rng)?;
        for x in &mut store.get_mut(bias).value.data_mut()[hidden..2 * hidden] {
            *x = F::one();
        }
        Ok(Self { w_ih, w_hh, bias, hidden })
    }

    /// One step from a precomputed input projection `x W_ih` (`1 x 4h`).
    fn step_projected<F: Real>(&self, g: &mut Graph<'_, F>, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let (w_hh, b) = (g.param(self.w_hh), g.param(self.bias));
        let rec = g.matmul(h, w_hh)?;
        let z = g.add(x_proj, rec)?;
        let z = g.add(z, b)?;
        let i = g.slice_cols(z, 0, n)?;
        let f = g.slice_cols(z, n, n)?;
        let cand = g.slice_cols(z, 2 * n, n)?;
        let o = g.slice_cols(z, 3 * n, n)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// One step on a `1 x input` row.
    pub fn step<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_ih = g.param(self.w_ih);
        let xp = g.matmul(x, w_ih)?;
        self.step_projected(g, xp, h, c)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, input: usize, hidden: usize, rng: &mut Lcg64) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::register(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            bwd: LstmCell::register(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
        })
    }
}

/// Runs both directions over the first `len` rows of `embedded` (`N x e`).
///
/// Returns `H` (`N x 2d`, rows `[fwd_t; bwd_t]`, zero rows past `len`) and
/// the summary `[fwd_{len-1}; bwd_0]` (`1 x 2d`).
pub fn bilstm_encode<F: Real>(g: &mut Graph<'_, F>, params: &BiLstm, embedded: Var, len: usize) -> Result<(Var, Var)> {
    let n = g.value(embedded).rows();
    if len == 0 {
        return Err(Error::Data("cannot encode an empty sequence".into()));
    }
    if len > n {
        return Err(Error::Shape {
            op: "bilstm_encode",
            left: g.shape(embedded).to_vec(),
            right: vec![len],
        });
    }
    let d = params.fwd.hidden;
    let run = |g: &mut Graph<'_, F>, cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, Var)>> {
        let w_ih = g.param(cell.w_ih);
        let proj = g.matmul(embedded, w_ih)?;
        let mut h = g.input(Tensor::zeros(&[1, d]));
        let mut c = g.input(Tensor::zeros(&[1, d]));
        let mut out = Vec::with_capacity(len);
        for t in order {
            let xp = g.slice_rows(proj, t, 1)?;
            let (h2, c2) = cell.step_projected(g, xp, h, c)?;
            h = h2;
            c = c2;
            out.push((t, h));
        }
        Ok(out)
    };
    let fwd = run(g, &params.fwd, &mut (0..len))?;
    let mut bwd = run(g, &params.bwd, &mut (0..len).rev())?;
    bwd.reverse();
    let mut rows = Vec::with_capacity(n);
    for t in 0..len {
        rows.push(g.concat_cols(&[fwd[t].1, bwd[t].1])?);
    }
    if len < n {
        rows.push(g.input(Tensor::zeros(&[n - len, 2 * d])));
    }
    let states = g.concat_rows(&rows)?;
    let summary = g.concat_cols(&[fwd[len - 1].1, bwd[0].1])?;
    Ok((states, summary))
}

/// `W_r` is stored as `4d x 2d`: rows `0..2d` act on `H_t`, rows `2d..4d` on `h_r`.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveGateParams {
    pub w_r: ParamId,
    pub w_q: ParamId,
    pub bias: ParamId,
}

/// Returns the gated states `H~ = g * H` and the gate values (`N x 2d`).
pub fn selective_gate<F: Real>(
    g: &mut Graph<'_, F>,
    states: Var,
    h_r: Var,
    h_q: Var,
    p: &SelectiveGateParams,
) -> Result<(Var, Var)> {
    let width = g.value(states).cols();
    let (w_r, w_q, b) = (g.param(p.w_r), g.param(p.w_q), g.param(p.bias));
    let w_state = g.slice_rows(w_r, 0, width)?;
    let w_summary = g.slice_rows(w_r, width, width)?;
    let per_step = g.matmul(states, w_state)?;
    let shared = g.matmul(h_r, w_summary)?;
    let q = g.matmul(h_q, w_q)?;
    let shared = g.add(shared, q)?;
    let shared = g.add(shared, b)?;
    let pre = g.add_row(per_step, shared)?;
    let gate = g.sigmoid(pre)?;
    Ok((g.mul(gate, states)?, gate))
}

/// `W_c` is stored as `(2d + 2d) x d_a`: rows `0..2d` act on `H~_i`, the rest on `s_t`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderAttentionParams {
    pub w_c: ParamId,
    pub w_q: Option<ParamId>,
    pub bias: ParamId,
    pub v: ParamId,
}

/// Per-record attention terms that do not depend on the decoder state.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCache {
    /// `H~ W_c[0..2d]` (`N x d_a`).
    keys: Var,
    /// `W_q' h_q + b_c`, or `b_c` alone (`1 x d_a`).
    offset: Var,
    values: Var,
}

pub fn attention_cache<F: Real>(
    g: &mut Graph<'_, F>,
    gated: Var,
    h_q: Option<Var>,
    p: &DecoderAttentionParams,
) -> Result<AttentionCache> {
    let width = g.value(gated).cols();
    let w_c = g.param(p.w_c);
    let w_states = g.slice_rows(w_c, 0, width)?;
    let keys = g.matmul(gated, w_states)?;
    let b = g.param(p.bias);
    let offset = match (p.w_q, h_q) {
        (Some(w_q), Some(h_q)) => {
            let w_q = g.param(w_q);
            let q = g.matmul(h_q, w_q)?;
            g.add(q, b)?
        }
        _ => b,
    };
    Ok(AttentionCache {
        keys,
        offset,
        values: gated,
    })
}

/// Context vector (`1 x 2d`) and attention weights (`1 x N`) for decoder state `s_t`.
pub fn qa_attention<F: Real>(
    g: &mut Graph<'_, F>,
    cache: &AttentionCache,
    s_t: Var,
    p: &DecoderAttentionParams,
    review_valid: &[bool],
) -> Result<(Var, Var)> {
    let width = g.value(cache.values).cols();
    let w_c = g.param(p.w_c);
    let state_rows = g.value(w_c).rows() - width;
    let w_state = g.slice_rows(w_c, width, state_rows)?;
    let s_proj = g.matmul(s_t, w_state)?;
    let row = g.add(s_proj, cache.offset)?;
    let c = g.add_row(cache.keys, row)?;
    let c = g.tanh(c)?;
    let v = g.param(p.v);
    let e = g.matmul(c, v)?;
    let e = g.transpose(e)?;
    let blocked: Vec<bool> = review_valid.iter().map(|&x| !x).collect();
    let weights = g.softmax_rows(e, Some(&blocked))?;
    let context = g.matmul(weights, cache.values)?;
    Ok((context, weights))
}

#[derive(Debug, Clone)]
pub struct RnnModel<F> {
    config: RnnConfig,
    vocab_size: usize,
    params: ParamStore<F>,
    embed: ParamId,
    query_enc: Option<BiLstm>,
    review_enc: BiLstm,
    gate: Option<SelectiveGateParams>,
    init_w: ParamId,
    init_b: ParamId,
    attn: DecoderAttentionParams,
    decoder: LstmCell,
    out: ParamId,
}

/// Source-side values for one record.
pub struct RnnEncoding {
    pub states: Var,
    pub gated: Var,
    pub gate: Option<Var>,
    pub h_r: Var,
    pub h_q: Option<Var>,
    pub init_state: Var,
}

impl<F: Real> RnnModel<F> {
    pub fn new(config: RnnConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary too small: {vocab_size}")));
        }
        let mut rng = Lcg64::new(seed);
        let mut p = ParamStore::new();
        let (d, e) = (config.hidden, config.embed);
        let w = 2 * d;
        let v = config.variant;
        let embed = p.add("embed", &[vocab_size, e], Init::Glorot, &mut rng)?;
        let query_enc = if v.uses_query() {
            Some(BiLstm::register(&mut p, "query_enc", e, d, &mut rng)?)
        } else {
            None
        };
        let review_enc = BiLstm::register(&mut p, "review_enc", e, d, &mut rng)?;
        let gate = if v.query_in_encoder() {
            Some(SelectiveGateParams {
                w_r: p.add("gate.w_r", &[2 * w, w], Init::Glorot, &mut rng)?,
                w_q: p.add("gate.w_q", &[w, w], Init::Glorot, &mut rng)?,
                bias: p.add("gate.bias", &[1, w], Init::Zeros, &mut rng)?,
            })
        } else {
            None
        };
        let init_w = p.add("init.w", &[w, w], Init::Glorot, &mut rng)?;
        let init_b = p.add("init.bias", &[1, w], Init::Zeros, &mut rng)?;
        let attn = DecoderAttentionParams {
            w_c: p.add("attn.w_c", &[2 * w, w], Init::Glorot, &mut rng)?,
            w_q: if v.query_in_decoder() {
                Some(p.add("attn.w_q", &[w, w], Init::Glorot, &mut rng)?)
            } else {
                None
            },
            bias: p.add("attn.bias", &[1, w], Init::Zeros, &mut rng)?,
            v: p.add("attn.v", &[w, 1], Init::Glorot, &mut rng)?,
        };
        let decoder = LstmCell::register(&mut p, "decoder", e + w, w, &mut rng)?;
        let out = p.add("out.w", &[w, vocab_size], Init::Glorot, &mut rng)?;
        Ok(Self {
            config,
            vocab_size,
            params: p,
            embed,
            query_enc,
            review_enc,
            gate,
            init_w,
            init_b,
            attn,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &RnnConfig {
        &self.config
    }

    pub fn output_id(&self) -> ParamId {
        self.out
    }

    pub fn gate_params(&self) -> Option<&SelectiveGateParams> {
        self.gate.as_ref()
    }

    pub fn attention_params(&self) -> &DecoderAttentionParams {
        &self.attn
    }

    pub fn review_encoder(&self) -> &BiLstm {
        &self.review_enc
    }

    pub fn decoder_cell(&self) -> &LstmCell {
        &self.decoder
    }

    pub fn with_params(mut self, params: ParamStore<F>) -> Result<Self> {
        check_same_layout(&self.params, &params)?;
        self.params = params;
        Ok(self)
    }

    pub fn embed(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embed);
        g.embedding(table, ids)
    }

    /// Encodes a review (PAD suffix allowed) and, for query-aware variants, the query.
    pub fn encode(&self, g: &mut Graph<'_, F>, review: &[usize], query: &[usize]) -> Result<RnnEncoding> {
        let review_len = review.iter().take_while(|&&t| t != PAD).count();
        if review_len == 0 {
            return Err(Error::Data("empty review".into()));
        }
        let e_r = self.embed(g, review)?;
        let (states, h_r) = bilstm_encode(g, &self.review_enc, e_r, review_len)?;
        let h_q = match &self.query_enc {
            Some(enc) => {
                let q_len = query.iter().take_while(|&&t| t != PAD).count();
                // An empty query is read as a single PAD token.
                let ids: &[usize] = if q_len == 0 { &[PAD] } else { &query[..q_len] };
                let e_q = self.embed(g, ids)?;
                Some(bilstm_encode(g, enc, e_q, ids.len())?.1)
            }
            None => None,
        };
        let (gated, gate) = match (&self.gate, h_q) {
            (Some(p), Some(h_q)) => {
                let (gated, gate) = selective_gate(g, states, h_r, h_q, p)?;
                (gated, Some(gate))
            }
            _ => (states, None),
        };
        let d = self.config.hidden;
        let last = g.slice_rows(gated, review_len - 1, 1)?;
        let first = g.slice_rows(gated, 0, 1)?;
        let fwd = g.slice_cols(last, 0, d)?;
        let bwd = g.slice_cols(first, d, d)?;
        let summary = g.concat_cols(&[fwd, bwd])?;
        let (iw, ib) = (g.param(self.init_w), g.param(self.init_b));
        let s0 = g.matmul(summary, iw)?;
        let s0 = g.add(s0, ib)?;
        let init_state = g.tanh(s0)?;
        Ok(RnnEncoding {
            states,
            gated,
            gate,
            h_r,
            h_q,
            init_state,
        })
    }

    /// LSTM step on `[prev embedding; context]`, then vocabulary logits.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_, F>,
        state: (Var, Var),
        prev_embedding: Var,
        context: Var,
    ) -> Result<((Var, Var), Var)> {
        let x = g.concat_cols(&[prev_embedding, context])?;
        let (h, c) = self.decoder.step(g, x, state.0, state.1)?;
        let w = g.param(self.out);
        let logits = g.matmul(h, w)?;
        Ok(((h, c), logits))
    }

    /// Teacher-forced logits (`M x V`) and per-step attention weights.
    pub fn decode_sequence(
        &self,
        g: &mut Graph<'_, F>,
        enc: &RnnEncoding,
        review_valid: &[bool],
        tip_input: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        if tip_input.is_empty() {
            return Err(Error::Data("empty tip input".into()));
        }
        let cache = attention_cache(g, enc.gated, enc.h_q, &self.attn)?;
        let emb = self.embed(g, tip_input)?;
        let w = 2 * self.config.hidden;
        let mut state = (enc.init_state, g.input(Tensor::zeros(&[1, w])));
        let mut rows = Vec::with_capacity(tip_input.len());
        let mut weights = Vec::with_capacity(tip_input.len());
        for t in 0..tip_input.len() {
            let (ctx, a) = qa_attention(g, &cache, state.0, &self.attn, review_valid)?;
            let x = g.slice_rows(emb, t, 1)?;
            let (next, logits) = self.decode_step(g, state, x, ctx)?;
            state = next;
            rows.push(logits);
            weights.push(a);
        }
        Ok((g.concat_rows(&rows)?, weights))
    }
}

impl<F: Real> Seq2Seq<F> for RnnModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn sample_logits(&self, g: &mut Graph<'_, F>, s: Sample<'_>, _dropout: Option<&mut Lcg64>) -> Result<Var> {
        let enc = self.encode(g, s.review, s.query)?;
        let valid: Vec<bool> = s.review.iter().map(|&t| t != PAD).collect();
        Ok(self.decode_sequence(g, &enc, &valid, s.tip_input)?.0)
    }
}

/// Cached source side for decoding.
#[derive(Debug, Clone)]
pub struct RnnState<F> {
    gated: Tensor<F>,
    h_q: Option<Tensor<F>>,
    init_state: Tensor<F>,
    review_valid: Vec<bool>,
}

impl<F: Real> StepScorer for RnnModel<F> {
    type State = RnnState<F>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, review: &[usize], query: &[usize]) -> Result<Self::State> {
        let mut g = Graph::inference(&self.params);
        let enc = self.encode(&mut g, review, query)?;
        Ok(RnnState {
            gated: g.value(enc.gated).clone(),
            h_q: enc.h_q.map(|v| g.value(v).clone()),
            init_state: g.value(enc.init_state).clone(),
            review_valid: review.iter().map(|&t| t != PAD).collect(),
        })
    }

    fn next_logits(&self, state: &Self::State, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let gated = g.input(state.gated.clone());
        let h_q = state.h_q.as_ref().map(|t| g.input(t.clone()));
        let init_state = g.input(state.init_state.clone());
        let enc = RnnEncoding {
            states: gated,
            gated,
            gate: None,
            h_r: init_state,
            h_q,
            init_state,
        };
        let (logits, _) = self.decode_sequence(&mut g, &enc, &state.review_valid, prefix)?;
        let t = g.value(logits);
        Ok(t.row_slice(t.rows() - 1).iter().map(|x| x.as_f64()).collect())
    }
}
