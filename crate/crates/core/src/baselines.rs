//! Extractive baselines that pick one sentence of the review: Query_LEAD,
//! Extract_BM25 and Extract_Embed.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizeMode;
use crate::error::{Error, Result};
use crate::evaluation::{cosine, max_pool};

pub use crate::evaluation::EmbeddingTable;

pub const TERMINATORS: [char; 8] = ['.', '!', '?', '。', '！', '？', '；', ';'];

/// Splits after each run of terminators; fragments are trimmed substrings of the input.
pub fn split_sentences(review: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = review.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if TERMINATORS.contains(&c) {
            while let Some(&(_, n)) = chars.peek() {
                if TERMINATORS.contains(&n) {
                    chars.next();
                } else {
                    break;
                }
            }
            let end = chars.peek().map_or(review.len(), |&(i, _)| i);
            out.push(&review[start..end]);
            start = end;
        }
    }
    out.push(&review[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Tokens used for matching: lowercased, edge punctuation removed, empties dropped.
pub fn match_tokens(text: &str, mode: TokenizeMode) -> Vec<String> {
    let pieces: Vec<String> = match mode {
        TokenizeMode::Whitespace => text.split_whitespace().map(str::to_lowercase).collect(),
        TokenizeMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_lowercase().collect()).collect(),
    };
    pieces
        .into_iter()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// The chosen sentence and how it was chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub sentence: String,
    pub index: usize,
    /// No evidence for any sentence; the first one was returned.
    pub fallback: bool,
}

impl Selection {
    fn first(sentences: &[&str]) -> Self {
        Self {
            sentence: sentences[0].to_string(),
            index: 0,
            fallback: true,
        }
    }

    fn at(sentences: &[&str], index: usize) -> Self {
        Self {
            sentence: sentences[index].to_string(),
            index,
            fallback: false,
        }
    }
}

fn sentences_of(review: &str) -> Result<Vec<&str>> {
    let s = split_sentences(review);
    if s.is_empty() {
        return Err(Error::Data("empty review".into()));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeadOptions {
    /// Only the full-query match and the lead fallback; no single-token tier.
    pub strict: bool,
    pub mode: TokenizeMode,
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// First sentence containing the whole query; else (unless strict) the first
/// containing any query token; else the first sentence.
pub fn query_lead(review: &str, query: &str, opts: LeadOptions) -> Result<Selection> {
    let sentences = sentences_of(review)?;
    let q = match_tokens(query, opts.mode);
    let toks: Vec<Vec<String>> = sentences.iter().map(|s| match_tokens(s, opts.mode)).collect();
    if let Some(i) = toks.iter().position(|t| contains_run(t, &q)) {
        return Ok(Selection::at(&sentences, i));
    }
    if !opts.strict {
        if let Some(i) = toks.iter().position(|t| q.iter().any(|w| t.contains(w))) {
            return Ok(Selection::at(&sentences, i));
        }
    }
    Ok(Selection::first(&sentences))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 < 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("invalid BM25 parameters k1={} b={}", self.k1, self.b)));
        }
        Ok(())
    }
}

/// Collection statistics over a set of tokenized sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Stats {
    pub sentences: usize,
    pub df: HashMap<String, usize>,
    pub avgdl: f64,
}

impl Bm25Stats {
    pub fn new(collection: &[Vec<String>]) -> Result<Self> {
        if collection.is_empty() {
            return Err(Error::Data("empty sentence collection".into()));
        }
        let mut df = HashMap::new();
        for s in collection {
            for t in s.iter().collect::<HashSet<_>>() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let total: usize = collection.iter().map(Vec::len).sum();
        Ok(Self {
            sentences: collection.len(),
            df,
            avgdl: total as f64 / collection.len() as f64,
        })
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((self.sentences as f64 - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 of one sentence against the distinct query terms.
pub fn bm25_score(sentence: &[String], query: &[String], stats: &Bm25Stats, params: Bm25Params) -> f64 {
    let len_ratio = if stats.avgdl > 0.0 {
        sentence.len() as f64 / stats.avgdl
    } else {
        1.0
    };
    let norm = params.k1 * (1.0 - params.b + params.b * len_ratio);
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for q in query {
        if !seen.insert(q) {
            continue;
        }
        let tf = sentence.iter().filter(|t| *t == q).count() as f64;
        if tf > 0.0 {
            score += stats.idf(q) * tf * (params.k1 + 1.0) / (tf + norm);
        }
    }
    score
}

/// Index of the first maximum.
fn first_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring sentence under BM25 with statistics from this review alone.
pub fn extract_bm25(review: &str, query: &str, params: Bm25Params, mode: TokenizeMode) -> Result<Selection> {
    params.validate()?;
    let sentences = sentences_of(review)?;
    let toks: Vec<Vec<String>> = sentences.iter().map(|s| match_tokens(s, mode)).collect();
    let stats = Bm25Stats::new(&toks)?;
    let q = match_tokens(query, mode);
    let scores: Vec<f64> = toks.iter().map(|s| bm25_score(s, &q, &stats, params)).collect();
    Ok(Selection::at(&sentences, first_argmax(&scores)))
}

/// Sentence whose max-pooled embedding is closest in cosine to the query's.
pub fn extract_embed(review: &str, query: &str, table: &EmbeddingTable, mode: TokenizeMode) -> Result<Selection> {
    let sentences = sentences_of(review)?;
    let Some(q) = max_pool(&match_tokens(query, mode), table) else {
        log::warn!("query has no token in the embedding table; using the first sentence");
        return Ok(Selection::first(&sentences));
    };
    let scores: Vec<f64> = sentences
        .iter()
        .map(|s| max_pool(&match_tokens(s, mode), table).map_or(-1.0, |v| cosine(&v, &q)))
        .collect();
    if scores.iter().all(|&s| s == -1.0) {
        log::warn!("no sentence has a token in the embedding table; using the first sentence");
        return Ok(Selection::first(&sentences));
    }
    Ok(Selection::at(&sentences, first_argmax(&scores)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    QueryLead,
    ExtractBm25,
    ExtractEmbed,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_lead" => Ok(Self::QueryLead),
            "extract_bm25" => Ok(Self::ExtractBm25),
            "extract_embed" => Ok(Self::ExtractEmbed),
            other => Err(Error::Config(format!("unknown baseline {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        match_tokens(s, TokenizeMode::Whitespace)
    }

    #[test]
    fn splitting() {
        assert_eq!(split_sentences("a. b!"), vec!["a.", "b!"]);
        assert_eq!(split_sentences("no terminator"), vec!["no terminator"]);
        assert_eq!(split_sentences("x?? y"), vec!["x??", "y"]);
        assert_eq!(split_sentences("好吃。很贵！"), vec!["好吃。", "很贵！"]);
        assert!(split_sentences("  ").is_empty());
        assert_eq!(split_sentences("...").len(), 1);
    }

    #[test]
    fn lead_tiers() {
        let o = LeadOptions::default();
        assert_eq!(query_lead("s1. cake here.", "cake", o).unwrap().sentence, "cake here.");
        let none = query_lead("first one. second one.", "zebra", o).unwrap();
        assert_eq!(none.sentence, "first one.");
        assert!(none.fallback);
        let partial = query_lead("x y. a z. b a c.", "a b", o).unwrap();
        assert_eq!(partial.sentence, "a z.");
        let strict = query_lead("x y. a z. b a c.", "a b", LeadOptions { strict: true, ..o }).unwrap();
        assert_eq!(strict.sentence, "x y.");
        assert!(query_lead("   ", "a", o).is_err());
    }

    #[test]
    fn bm25_closed_form() {
        let coll = vec![t("cake")];
        let stats = Bm25Stats::new(&coll).unwrap();
        let s = bm25_score(&coll[0], &t("cake"), &stats, Bm25Params::default());
        assert!((s - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert_eq!(bm25_score(&coll[0], &t("pie"), &stats, Bm25Params::default()), 0.0);
        assert!(Bm25Stats::new(&[]).is_err());
    }

    #[test]
    fn bm25_monotone() {
        let coll = vec![t("a x"), t("a a x"), t("a a a x"), t("b c")];
        let stats = Bm25Stats::new(&coll).unwrap();
        let p = Bm25Params::default();
        let s: Vec<f64> = coll.iter().map(|c| bm25_score(c, &t("a"), &stats, p)).collect();
        assert!(s[0] <= s[1] && s[1] <= s[2]);
        assert!(bm25_score(&t("a x"), &t("a"), &stats, p) >= bm25_score(&t("a x x"), &t("a"), &stats, p));
    }

    #[test]
    fn extract_picks_matching_sentence() {
        let p = Bm25Params::default();
        let m = TokenizeMode::Whitespace;
        assert_eq!(extract_bm25("only one", "x", p, m).unwrap().sentence, "only one");
        let r = extract_bm25("a b. c d. cake e. f g.", "cake", p, m).unwrap();
        assert_eq!(r.index, 2);
    }

    #[test]
    fn embed_selection() {
        let table = EmbeddingTable::parse("a 1 0 0\nb 0 1 0\nc 0 0 1\n").unwrap();
        let m = TokenizeMode::Whitespace;
        assert_eq!(extract_embed("b. a c. c.", "a c", &table, m).unwrap().index, 1);
        assert_eq!(extract_embed("c. b a.", "b", &table, m).unwrap().index, 1);
        let oov = extract_embed("x. y.", "a", &table, m).unwrap();
        assert!(oov.fallback && oov.index == 0);
        let q_oov = extract_embed("a. b.", "zz", &table, m).unwrap();
        assert!(q_oov.fallback);
    }
}
