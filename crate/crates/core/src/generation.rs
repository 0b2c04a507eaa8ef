//! Greedy and beam-search decoding over any [`StepScorer`].

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, TokenizeMode, Triplet, Vocabulary, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::model::StepScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum number of surface tokens (BOS/EOS excluded).
    pub max_len: usize,
    /// Length-normalization exponent: hypotheses rank by `score / len^alpha`.
    pub alpha: f64,
    /// Never emit UNK.
    pub mask_unk: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            max_len: 30,
            alpha: 0.0,
            mask_unk: true,
        }
    }
}

impl BeamConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            width: 1,
            max_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// BOS-prefixed; ends in EOS when the model chose to stop.
    pub tokens: Vec<usize>,
    /// Sum of the chosen tokens' log-probabilities.
    pub score: f64,
    /// EOS emitted or length cap reached.
    pub finished: bool,
}

impl Hypothesis {
    /// Surface token ids without BOS/EOS.
    pub fn surface(&self) -> &[usize] {
        let end = if self.tokens.last() == Some(&EOS) && self.tokens.len() > 1 {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1.min(end)..end]
    }

    /// Number of decoding steps taken (EOS included).
    pub fn steps(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn normalized(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.score
        } else {
            self.score / (self.steps().max(1) as f64).powf(alpha)
        }
    }
}

/// Log-softmax of next-token logits with UNK optionally removed.
pub fn log_probs(logits: &[f64], mask_unk: bool) -> Vec<f64> {
    let mut z = logits.to_vec();
    if mask_unk && UNK < z.len() {
        z[UNK] = f64::NEG_INFINITY;
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_logits(logits: &[f64], vocab: usize) -> Result<()> {
    if logits.len() != vocab {
        return Err(Error::Shape {
            op: "next_logits",
            left: vec![logits.len()],
            right: vec![vocab],
        });
    }
    Ok(())
}

/// Argmax decoding; returns surface ids.
pub fn greedy_decode<M: StepScorer + ?Sized>(
    model: &M,
    review: &[usize],
    query: &[usize],
    max_len: usize,
    mask_unk: bool,
) -> Result<Vec<usize>> {
    Ok(greedy_hypothesis(model, review, query, max_len, mask_unk)?.surface().to_vec())
}

pub fn greedy_hypothesis<M: StepScorer + ?Sized>(
    model: &M,
    review: &[usize],
    query: &[usize],
    max_len: usize,
    mask_unk: bool,
) -> Result<Hypothesis> {
    let state = model.start(review, query)?;
    let mut tokens = vec![BOS];
    let mut score = 0.0;
    for _ in 0..max_len {
        let logits = model.next_logits(&state, &tokens)?;
        check_logits(&logits, model.vocab_size())?;
        let lp = log_probs(&logits, mask_unk);
        let next = argmax(&lp);
        score += lp[next];
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        score,
        finished: true,
    })
}

/// Ranking order: normalized score descending, then fewer tokens, then lexicographic ids.
pub fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.normalized(alpha)
        .total_cmp(&a.normalized(alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search; returns every finished and surviving hypothesis, best first.
pub fn beam_search<M: StepScorer + ?Sized>(
    model: &M,
    review: &[usize],
    query: &[usize],
    config: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let state = model.start(review, query)?;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
    }];
    let mut pool = Vec::new();
    let alpha = config.alpha;
    for _ in 0..config.max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for h in &live {
            let logits = model.next_logits(&state, &h.tokens)?;
            check_logits(&logits, model.vocab_size())?;
            for (tok, lp) in log_probs(&logits, config.mask_unk).into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    score: h.score + lp,
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, alpha));
        candidates.truncate(config.width);
        live.clear();
        for c in candidates {
            if c.finished {
                pool.push(c);
            } else {
                live.push(c);
            }
        }
    }
    for mut h in live {
        h.finished = true;
        pool.push(h);
    }
    pool.sort_by(|a, b| rank(a, b, alpha));
    Ok(pool)
}

/// Recomputes a hypothesis score with fresh forward passes.
pub fn rescore<M: StepScorer + ?Sized>(
    model: &M,
    review: &[usize],
    query: &[usize],
    tokens: &[usize],
    mask_unk: bool,
) -> Result<f64> {
    if tokens.first() != Some(&BOS) {
        return Err(Error::Data("hypothesis must start with BOS".into()));
    }
    let state = model.start(review, query)?;
    let mut total = 0.0;
    for t in 1..tokens.len() {
        let logits = model.next_logits(&state, &tokens[..t])?;
        total += log_probs(&logits, mask_unk)[tokens[t]];
    }
    Ok(total)
}

/// Best surface ids under `config` (greedy when the width is 1).
pub fn decode<M: StepScorer + ?Sized>(model: &M, review: &[usize], query: &[usize], config: &BeamConfig) -> Result<Vec<usize>> {
    if config.width == 1 {
        return greedy_decode(model, review, query, config.max_len, config.mask_unk);
    }
    let ranked = beam_search(model, review, query, config)?;
    Ok(ranked.first().map(|h| h.surface().to_vec()).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordId {
    Name(String),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTip {
    pub id: RecordId,
    pub tip: String,
}

#[derive(Debug, Default)]
pub struct GenerationOutput {
    /// One entry per successfully decoded record, in input order.
    pub tips: Vec<GeneratedTip>,
    /// `(record index, error)` for records that failed.
    pub failures: Vec<(usize, Error)>,
}

/// Decodes every triplet in parallel; output order follows input order.
pub fn batch_generate<M: StepScorer + Sync + ?Sized>(
    model: &M,
    triplets: &[Triplet],
    vocab: &Vocabulary,
    mode: TokenizeMode,
    config: &BeamConfig,
) -> Result<GenerationOutput> {
    config.validate()?;
    let results: Vec<Result<String>> = triplets
        .par_iter()
        .map(|t| {
            let ids = decode(model, &t.review, &t.query, config)?;
            Ok(detokenize(&vocab.decode(&ids), mode))
        })
        .collect();
    let mut out = GenerationOutput::default();
    for (i, (r, t)) in results.into_iter().zip(triplets).enumerate() {
        match r {
            Ok(tip) => out.tips.push(GeneratedTip {
                id: t.id.clone().map_or(RecordId::Index(i), RecordId::Name),
                tip,
            }),
            Err(e) => out.failures.push((i, e)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, RawRecord, LengthCaps};
    use crate::rng::Lcg64;

    /// Logits are a pseudo-random function of the prefix.
    struct HashedToy {
        vocab: usize,
        seed: u64,
    }

    impl StepScorer for HashedToy {
        type State = ();

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn start(&self, _: &[usize], _: &[usize]) -> Result<()> {
            Ok(())
        }

        fn next_logits(&self, _: &(), prefix: &[usize]) -> Result<Vec<f64>> {
            let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
            let mut rng = Lcg64::new(key);
            Ok((0..self.vocab).map(|_| 2.0 * rng.normal()).collect())
        }
    }

    /// Logits depend on the previous token only.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        type State = ();

        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }

        fn start(&self, _: &[usize], _: &[usize]) -> Result<()> {
            Ok(())
        }

        fn next_logits(&self, _: &(), prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0[*prefix.last().unwrap()].clone())
        }
    }

    fn exhaustive_best(model: &HashedToy, max_len: usize) -> (Vec<usize>, f64) {
        let v = model.vocab;
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((prefix, score)) = stack.pop() {
            let lp = log_probs(&model.next_logits(&(), &prefix).unwrap(), false);
            for tok in 0..v {
                let mut next = prefix.clone();
                next.push(tok);
                let s = score + lp[tok];
                let surface = next.len() - 1 - usize::from(tok == EOS);
                if tok == EOS || surface == max_len {
                    let better = match &best {
                        None => true,
                        Some((bt, bs)) => s > *bs || (s == *bs && (next.len(), &next) < (bt.len(), bt)),
                    };
                    if better {
                        best = Some((next, s));
                    }
                } else {
                    stack.push((next, s));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn always_eos_gives_empty_tip() {
        let mut rows = vec![vec![0.0; 6]; 6];
        for r in &mut rows {
            r[EOS] = 5.0;
        }
        let m = Table(rows);
        assert!(greedy_decode(&m, &[4], &[4], 10, true).unwrap().is_empty());
        let beams = beam_search(&m, &[4], &[4], &BeamConfig::default()).unwrap();
        assert_eq!(beams[0].tokens, vec![BOS, EOS]);
    }

    #[test]
    fn greedy_walks_the_table() {
        // BOS -> 4 -> 5 -> EOS
        let mut rows = vec![vec![0.0; 6]; 6];
        rows[BOS][4] = 3.0;
        rows[4][5] = 3.0;
        rows[5][EOS] = 3.0;
        rows[5][UNK] = 9.0;
        let m = Table(rows);
        assert_eq!(greedy_decode(&m, &[4], &[4], 10, true).unwrap(), vec![4, 5]);
        assert_eq!(greedy_decode(&m, &[4], &[4], 1, true).unwrap(), vec![4]);
        let unmasked = greedy_decode(&m, &[4], &[4], 3, false).unwrap();
        assert_eq!(unmasked[..3], [4, 5, UNK]);
    }

    #[test]
    fn greedy_ties_go_to_lowest_id() {
        let mut rows = vec![vec![0.0; 6]; 6];
        rows[BOS][4] = 1.0;
        rows[BOS][5] = 1.0;
        rows[4][EOS] = 1.0;
        rows[5][EOS] = 1.0;
        assert_eq!(greedy_decode(&Table(rows), &[4], &[4], 5, true).unwrap(), vec![4]);
    }

    #[test]
    fn width_one_matches_greedy() {
        for seed in 0..50 {
            let m = HashedToy { vocab: 7, seed };
            let greedy = greedy_hypothesis(&m, &[4], &[4], 6, true).unwrap();
            let cfg = BeamConfig { width: 1, max_len: 6, ..BeamConfig::default() };
            let beams = beam_search(&m, &[4], &[4], &cfg).unwrap();
            assert_eq!(beams.len(), 1);
            assert_eq!(beams[0].tokens, greedy.tokens);
            assert_eq!(beams[0].score.to_bits(), greedy.score.to_bits());
        }
    }

    #[test]
    fn huge_beam_is_exhaustive() {
        for seed in 0..20 {
            let m = HashedToy { vocab: 5, seed };
            let (tokens, score) = exhaustive_best(&m, 3);
            let cfg = BeamConfig { width: 125, max_len: 3, alpha: 0.0, mask_unk: false };
            let best = &beam_search(&m, &[4], &[4], &cfg).unwrap()[0];
            assert_eq!(best.tokens, tokens);
            assert!((best.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_output_is_ranked_and_rescorable() {
        for seed in 0..10 {
            let m = HashedToy { vocab: 6, seed };
            let cfg = BeamConfig { width: 3, max_len: 4, alpha: 0.7, mask_unk: true };
            let beams = beam_search(&m, &[4], &[4], &cfg).unwrap();
            for w in beams.windows(2) {
                assert!(w[0].normalized(0.7) >= w[1].normalized(0.7));
            }
            for h in &beams {
                assert!(h.surface().len() <= 4);
                assert!(h.tokens.len() <= 4 + 2);
                assert!(!h.tokens[1..].contains(&UNK));
                let s = rescore(&m, &[4], &[4], &h.tokens, true).unwrap();
                assert!((s - h.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beam_never_beats_exhaustive() {
        for seed in 0..20 {
            let m = HashedToy { vocab: 5, seed };
            let (_, best) = exhaustive_best(&m, 3);
            for width in 1..6 {
                let cfg = BeamConfig { width, max_len: 3, alpha: 0.0, mask_unk: false };
                let got = beam_search(&m, &[4], &[4], &cfg).unwrap()[0].score;
                assert!(got <= best + 1e-12);
            }
        }
    }

    #[test]
    fn batch_generation_keeps_order_and_round_trips() {
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<bos>", "<eos>", "<unk>", "good", "food"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let mut rows = vec![vec![0.0; 6]; 6];
        rows[BOS][4] = 3.0;
        rows[4][5] = 3.0;
        rows[5][EOS] = 3.0;
        let m = Table(rows);
        let recs: Vec<Triplet> = (0..3)
            .map(|i| {
                let r = RawRecord {
                    id: (i != 1).then(|| format!("r{i}")),
                    review: "good food".into(),
                    query: "food".into(),
                    tip: None,
                };
                Triplet::encode(&r, &vocab, TokenizeMode::Whitespace, LengthCaps::default())
            })
            .collect();
        let out = batch_generate(&m, &recs, &vocab, TokenizeMode::Whitespace, &BeamConfig::default()).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.tips[0].id, RecordId::Name("r0".into()));
        assert_eq!(out.tips[1].id, RecordId::Index(1));
        assert_eq!(out.tips[2].tip, "good food");
        let again = vocab.encode(&tokenize(&out.tips[2].tip, TokenizeMode::Whitespace), 30, false);
        assert_eq!(again, vec![4, 5]);
        let empty = batch_generate(&m, &[], &vocab, TokenizeMode::Whitespace, &BeamConfig::default()).unwrap();
        assert!(empty.tips.is_empty());
        let line = serde_json::to_string(&out.tips[1]).unwrap();
        assert_eq!(line, r#"{"id":1,"tip":"good food"}"#);
    }

    #[test]
    fn zero_width_rejected() {
        let m = HashedToy { vocab: 5, seed: 0 };
        let cfg = BeamConfig { width: 0, ..BeamConfig::default() };
        assert!(beam_search(&m, &[4], &[4], &cfg).is_err());
    }
}
