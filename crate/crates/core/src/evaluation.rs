//! Semantic, Lexicon and BLEU metrics, scaled to 0-100 in reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenizeMode};
use crate::error::{Error, Result};

/// Token vectors of a single dimension, in the word2vec text layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    duplicates: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
            duplicates: 0,
        }
    }

    /// Inserts a vector; returns `false` (and keeps the old one) for a repeated token.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Data(format!("expected {} dims, got {}", self.dim, vector.len())));
        }
        if self.index.contains_key(token) {
            self.duplicates += 1;
            return Ok(false);
        }
        self.index.insert(token.to_string(), self.index.len());
        self.data.extend_from_slice(vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Multiplies every vector by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Parses word2vec text: an optional `count dim` header, then `token v1 .. vD` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 {
                if let (Ok(_), Ok(dim)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    table = Some(EmbeddingTable::new(dim));
                    continue;
                }
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(fields.len() - 1));
            if fields.len() - 1 != t.dim || t.dim == 0 {
                return Err(Error::Line {
                    line: line_no,
                    msg: format!("expected {} dims", t.dim),
                });
            }
            let vector = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Line {
                    line: line_no,
                    msg: format!("bad number: {e}"),
                })?;
            if !t.insert(fields[0], &vector)? {
                log::warn!("line {line_no}: duplicate token {:?} ignored", fields[0]);
            }
        }
        table.ok_or_else(|| Error::Data("embedding file is empty".into()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Line { line, msg } => Error::Data(format!("{}: line {line}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Elementwise max over the in-table token vectors; `None` if no token is in the table.
pub fn max_pool<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Option<Vec<f64>> {
    let mut pooled: Option<Vec<f64>> = None;
    for v in tokens.iter().filter_map(|t| table.get(t.as_ref())) {
        match &mut pooled {
            None => pooled = Some(v.to_vec()),
            Some(p) => p.iter_mut().zip(v).for_each(|(a, &b)| *a = a.max(b)),
        }
    }
    pooled
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine of max-pooled tip and query embeddings; `None` when either side has no in-table token.
pub fn semantic_score<S: AsRef<str>>(tip: &[S], query: &[S], table: &EmbeddingTable) -> Option<f64> {
    Some(cosine(&max_pool(tip, table)?, &max_pool(query, table)?))
}

/// Share of the query found in the tip: distinct query tokens present in the tip over
/// the raw query length, or, with `multiset`, query positions whose token is present.
/// `None` for an empty query.
pub fn lexicon_score<S: AsRef<str>>(tip: &[S], query: &[S], multiset: bool) -> Option<f64> {
    if query.is_empty() {
        return None;
    }
    let in_tip: HashSet<&str> = tip.iter().map(|t| t.as_ref()).collect();
    let hits = if multiset {
        query.iter().filter(|q| in_tip.contains(q.as_ref())).count()
    } else {
        query
            .iter()
            .map(|q| q.as_ref())
            .filter(|q| in_tip.contains(q))
            .collect::<HashSet<_>>()
            .len()
    };
    Some(hits as f64 / query.len() as f64)
}

pub const BLEU_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU; sums over records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn from_pair<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn merge(mut self, other: Self) -> Self {
        for n in 0..BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        self
    }

    /// BLEU in `[0, 1]` with add-one smoothing of zero-match orders.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..BLEU_ORDER {
            let p = if self.matches[n] == 0 {
                1.0 / (self.totals[n] as f64 + 1.0)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln() / BLEU_ORDER as f64;
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * log_sum.exp()
    }
}

/// Corpus-level BLEU-4 in `[0, 1]`, one reference per hypothesis.
pub fn bleu_corpus<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let stats = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::from_pair(h, r))
        .fold(BleuStats::default(), BleuStats::merge);
    Ok(stats.score())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub semantic: usize,
    pub lexicon: usize,
}

/// Run-level metrics, each multiplied by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub semantic: Option<f64>,
    pub lexicon: f64,
    pub bleu: f64,
    pub records: usize,
    pub skipped: Skipped,
}

/// One record to score: generated tip, reference tip and query as raw text.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord<'a> {
    pub tip: &'a str,
    pub reference: &'a str,
    pub query: &'a str,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub mode: TokenizeMode,
    pub multiset_lexicon: bool,
}

/// Per-record Semantic and Lexicon averaged over scorable records; BLEU over the corpus.
pub fn evaluate_run(records: &[EvalRecord<'_>], table: Option<&EmbeddingTable>, opts: EvalOptions) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut hyps = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    let mut skipped = Skipped::default();
    let (mut lex_sum, mut lex_n) = (0.0, 0usize);
    let (mut sem_sum, mut sem_n) = (0.0, 0usize);
    for r in records {
        let tip = tokenize(r.tip, opts.mode);
        let query = tokenize(r.query, opts.mode);
        match lexicon_score(&tip, &query, opts.multiset_lexicon) {
            Some(x) => {
                lex_sum += x;
                lex_n += 1;
            }
            None => skipped.lexicon += 1,
        }
        if let Some(t) = table {
            match semantic_score(&tip, &query, t) {
                Some(x) => {
                    sem_sum += x;
                    sem_n += 1;
                }
                None => skipped.semantic += 1,
            }
        }
        hyps.push(tip);
        refs.push(tokenize(r.reference, opts.mode));
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { 100.0 * s / n as f64 };
    Ok(MetricReport {
        semantic: table.map(|_| mean(sem_sum, sem_n)),
        lexicon: mean(lex_sum, lex_n),
        bleu: 100.0 * bleu_corpus(&hyps, &refs)?,
        records: records.len(),
        skipped,
    })
}

/// Plain-text table with one row per labelled report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "Model", "Semantic", "Lexicon", "BLEU");
    for (name, r) in rows {
        let sem = r.semantic.map_or_else(|| "-".to_string(), |s| format!("{s:.2}"));
        let _ = writeln!(out, "{name:<width$}  {sem:>8}  {:>8.2}  {:>8.2}", r.lexicon, r.bleu);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn one_hot() -> EmbeddingTable {
        EmbeddingTable::parse("a 1 0 0\nb 0 1 0\nc 0 0 1\n").unwrap()
    }

    #[test]
    fn loader_header_and_errors() {
        let plain = EmbeddingTable::parse("x 1 2 3\ny 4 5 6\n").unwrap();
        let header = EmbeddingTable::parse("2 3\nx 1 2 3\ny 4 5 6\n").unwrap();
        assert_eq!(plain, header);
        assert_eq!(plain.len(), 2);
        let e = EmbeddingTable::parse("2 3\nx 1 2 3\ny 4 5 6\nz 1 2\n").unwrap_err();
        assert_eq!(e.to_string(), "line 4: expected 3 dims");
        let dup = EmbeddingTable::parse("x 1\nx 2\n").unwrap();
        assert_eq!(dup.get("x"), Some(&[1.0][..]));
        assert_eq!(dup.duplicates(), 1);
    }

    #[test]
    fn semantic_examples() {
        let t = one_hot();
        assert!((semantic_score(&toks("a b"), &toks("a b"), &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(semantic_score(&toks("a"), &toks("b c"), &t), Some(0.0));
        assert_eq!(semantic_score(&toks("zz"), &toks("a"), &t), None);
        // pooled tip (3, 2), query (1, 1): cos = 5 / (sqrt(13) sqrt(2))
        let t2 = EmbeddingTable::parse("p 1 2\nq 3 -1\nr 0 0\ns 1 1\n").unwrap();
        let got = semantic_score(&toks("p q r"), &toks("s"), &t2).unwrap();
        assert!((got - 5.0 / (13f64.sqrt() * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn lexicon_examples() {
        assert_eq!(lexicon_score(&toks("a b c"), &toks("a d"), false), Some(0.5));
        assert_eq!(lexicon_score(&toks("a b"), &toks("a b"), false), Some(1.0));
        assert_eq!(lexicon_score(&toks("a"), &toks("a a b"), false), Some(1.0 / 3.0));
        assert_eq!(lexicon_score(&toks("a"), &toks("a a b"), true), Some(2.0 / 3.0));
        assert_eq!(lexicon_score(&toks("a"), &[], false), None);
    }

    #[test]
    fn bleu_examples() {
        let c = vec![toks("the cat sat on the mat"), toks("a b")];
        assert_eq!(bleu_corpus(&c, &c).unwrap(), 1.0);
        let b = bleu_corpus(&[toks("x y z")], &[toks("a b c")]).unwrap();
        assert!(b > 0.0 && b < 0.5);
        assert!(bleu_corpus::<String>(&[], &[]).is_err());
        assert_eq!(bleu_corpus(&[vec![]], &[toks("a")]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_value() {
        // hyp "a b c d", ref "a b c e": p = 3/4, 2/3, 1/2, smoothed 1/(1+1)
        let got = bleu_corpus(&[toks("a b c d")], &[toks("a b c e")]).unwrap();
        let want = ((0.75f64).ln() + (2.0f64 / 3.0).ln() + 0.5f64.ln() + 0.5f64.ln()) / 4.0;
        assert!((got - want.exp()).abs() < 1e-12);
        // brevity penalty: hyp "a b" vs ref "a b c d"
        let got = bleu_corpus(&[toks("a b")], &[toks("a b c d")]).unwrap();
        let p = (1.0f64 * 1.0 * 1.0 * 1.0).ln() / 4.0;
        assert!((got - (1.0f64 - 2.0).exp() * p.exp()).abs() < 1e-12);
    }

    #[test]
    fn report_perfect_copy() {
        let recs = [
            EvalRecord { tip: "a b c", reference: "a b c", query: "a d" },
            EvalRecord { tip: "b", reference: "b", query: "" },
        ];
        let r = evaluate_run(&recs, Some(&one_hot()), EvalOptions::default()).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.lexicon, 50.0);
        assert_eq!(r.skipped, Skipped { semantic: 1, lexicon: 1 });
        let no_table = evaluate_run(&recs, None, EvalOptions::default()).unwrap();
        assert_eq!(no_table.semantic, None);
        let text = format_table(&[("copy".into(), no_table)]);
        assert!(text.contains("copy") && text.contains("100.00"));
    }
}
