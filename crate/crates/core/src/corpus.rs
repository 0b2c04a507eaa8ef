//! Triplet ingestion: tokenization, vocabularies, JSONL loading, splits and batches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::Lcg64;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizeMode {
    /// Lowercase, split on Unicode whitespace.
    #[default]
    Whitespace,
    /// One token per non-whitespace character.
    Char,
}

impl std::str::FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(Self::Whitespace),
            "char" => Ok(Self::Char),
            other => Err(Error::Config(format!("unknown tokenize mode {other}"))),
        }
    }
}

/// Prefixes `_` to tokens of the form `_*<pad>` (and the other reserved
/// literals) so corpus text can never collide with a reserved marker.
fn escape_reserved(token: String) -> String {
    let stripped = token.trim_start_matches('_');
    if RESERVED.contains(&stripped) {
        format!("_{token}")
    } else {
        token
    }
}

pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => text
            .split_whitespace()
            .map(|t| escape_reserved(t.to_lowercase()))
            .collect(),
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

/// Inverse of tokenization for display: spaces between words, nothing between characters.
pub fn detokenize(tokens: &[String], mode: TokenizeMode) -> String {
    match mode {
        TokenizeMode::Whitespace => tokens.join(" "),
        TokenizeMode::Char => tokens.concat(),
    }
}

/// Bijection between tokens and ids `0..V`; ids 0-3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved tokens are distinct")
    }

    /// Wraps an id-ordered token list, checking the reserved prefix and uniqueness.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Data(
                "vocabulary must start with <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Line {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens with frequency `>= min_freq`, ranked by frequency then
    /// lexicographically, truncated so the vocabulary has at most `max_size` entries.
    pub fn build<'a, I, S>(sequences: I, min_freq: usize, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if min_freq < 1 || max_size < 5 {
            return Err(Error::Config(format!(
                "min_freq must be >= 1 and max_size >= 5 (got {min_freq}, {max_size})"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !RESERVED.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids (unknown tokens to UNK), keeping at most `max_len`
    /// of them, and frames the result with BOS/EOS when asked.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize, add_bos_eos: bool) -> Vec<usize> {
        let body = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK));
        if add_bos_eos {
            std::iter::once(BOS).chain(body).chain(std::iter::once(EOS)).collect()
        } else {
            body.collect()
        }
    }

    /// Ids back to tokens, skipping PAD/BOS and stopping at EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&id| id != EOS)
            .filter(|&id| id != PAD && id != BOS)
            .map(|id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let tokens = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?;
        Self::from_tokens(tokens)
    }
}

/// One line of a dataset file before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RawRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub review: String,
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tip: Option<String>,
}

/// Whether records must carry a tip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    Train,
    Inference,
}

fn string_field(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> Result<Option<String>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::Line {
            line,
            msg: format!("field {name} must be a string"),
        }),
    }
}

fn required(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> Result<String> {
    let value = string_field(obj, name, line)?.ok_or_else(|| Error::Line {
        line,
        msg: format!("missing field {name}"),
    })?;
    if value.trim().is_empty() {
        return Err(Error::Line {
            line,
            msg: format!("empty field {name}"),
        });
    }
    Ok(value)
}

/// Parses JSONL text; line numbers in errors are 1-based. Blank lines are skipped.
pub fn parse_jsonl(text: &str, mode: LoadMode) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| Error::Line {
            line,
            msg: format!("malformed JSON: {e}"),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Line {
                line,
                msg: "expected a JSON object".into(),
            });
        };
        let review = required(&obj, "review", line)?;
        let query = required(&obj, "query", line)?;
        let tip = match mode {
            LoadMode::Train => Some(required(&obj, "tip", line)?),
            LoadMode::Inference => string_field(&obj, "tip", line)?.filter(|t| !t.trim().is_empty()),
        };
        let id = match obj.get("id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => {
                return Err(Error::Line {
                    line,
                    msg: "field id must be a string".into(),
                })
            }
        };
        out.push(RawRecord { id, review, query, tip });
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>, mode: LoadMode) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, mode).map_err(|e| match e {
        Error::Line { line, msg } => Error::Data(format!("{}: line {line}: {msg}", path.display())),
        other => other,
    })
}

/// Per-dataset truncation limits for review, query and tip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthCaps {
    pub review: usize,
    pub query: usize,
    pub tip: usize,
}

impl LengthCaps {
    pub const DEBATE: LengthCaps = LengthCaps {
        review: 160,
        query: 30,
        tip: 30,
    };
    pub const DIANPING: LengthCaps = LengthCaps {
        review: 150,
        query: 5,
        tip: 15,
    };
}

impl Default for LengthCaps {
    fn default() -> Self {
        Self::DEBATE
    }
}

/// An encoded (review, query, tip) record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub id: Option<String>,
    pub review: Vec<usize>,
    pub query: Vec<usize>,
    /// `BOS t_1 .. t_M EOS`, or empty when the record has no tip.
    pub tip: Vec<usize>,
    pub raw_review: String,
    pub raw_query: String,
    pub raw_tip: String,
}

impl Triplet {
    pub fn encode(record: &RawRecord, vocab: &Vocabulary, mode: TokenizeMode, caps: LengthCaps) -> Self {
        let review = vocab.encode(&tokenize(&record.review, mode), caps.review, false);
        let query = vocab.encode(&tokenize(&record.query, mode), caps.query, false);
        let tip = match &record.tip {
            Some(t) if !tokenize(t, mode).is_empty() => {
                vocab.encode(&tokenize(t, mode), caps.tip, true)
            }
            _ => Vec::new(),
        };
        Self {
            id: record.id.clone(),
            review,
            query,
            tip,
            raw_review: record.review.clone(),
            raw_query: record.query.clone(),
            raw_tip: record.tip.clone().unwrap_or_default(),
        }
    }

    /// Tip surface ids without BOS/EOS framing.
    pub fn tip_tokens(&self) -> &[usize] {
        if self.tip.len() >= 2 {
            &self.tip[1..self.tip.len() - 1]
        } else {
            &[]
        }
    }

    pub fn tip_input(&self) -> &[usize] {
        &self.tip[..self.tip.len().saturating_sub(1)]
    }

    pub fn tip_target(&self) -> &[usize] {
        self.tip.get(1..).unwrap_or(&[])
    }
}

/// Tokenizes every text field of the records and builds a vocabulary.
pub fn build_vocab(records: &[RawRecord], mode: TokenizeMode, min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    let seqs: Vec<Vec<String>> = records
        .iter()
        .flat_map(|r| {
            [Some(&r.review), Some(&r.query), r.tip.as_ref()]
                .into_iter()
                .flatten()
                .map(|t| tokenize(t, mode))
        })
        .collect();
    Vocabulary::build(seqs.iter().map(Vec::as_slice), min_freq, max_size)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
    pub split_seed: u64,
}

/// Seeded shuffle followed by contiguous 80/10/10 slices.
pub fn split_dataset<T: Clone>(records: &[T], seed: u64) -> Result<DatasetSplit<T>> {
    let n = records.len();
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 records to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Lcg64::new(seed).shuffle(&mut order);
    let held = n / 10;
    let n_train = n - 2 * held;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + held]),
        test: pick(&order[n_train + held..]),
        split_seed: seed,
    })
}

/// PAD-filled id matrices for one minibatch (teacher forcing layout).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the rows in the source slice.
    pub indices: Vec<usize>,
    pub review: Vec<Vec<usize>>,
    pub review_lens: Vec<usize>,
    pub query: Vec<Vec<usize>>,
    pub query_lens: Vec<usize>,
    pub tip_input: Vec<Vec<usize>>,
    pub tip_target: Vec<Vec<usize>>,
    pub tip_lens: Vec<usize>,
}

/// Unpadded view of one batch row.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub review: &'a [usize],
    pub query: &'a [usize],
    pub tip_input: &'a [usize],
    pub tip_target: &'a [usize],
}

fn pad_rows(rows: Vec<&[usize]>) -> (Vec<Vec<usize>>, Vec<usize>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let lens = rows.iter().map(|r| r.len()).collect();
    let padded = rows
        .into_iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(width, PAD);
            v
        })
        .collect();
    (padded, lens)
}

impl Batch {
    pub fn from_triplets(triplets: &[Triplet], indices: Vec<usize>) -> Self {
        let rows: Vec<&Triplet> = indices.iter().map(|&i| &triplets[i]).collect();
        let (review, review_lens) = pad_rows(rows.iter().map(|t| t.review.as_slice()).collect());
        let (query, query_lens) = pad_rows(rows.iter().map(|t| t.query.as_slice()).collect());
        let (tip_input, tip_lens) = pad_rows(rows.iter().map(|t| t.tip_input()).collect());
        let (tip_target, _) = pad_rows(rows.iter().map(|t| t.tip_target()).collect());
        Self {
            indices,
            review,
            review_lens,
            query,
            query_lens,
            tip_input,
            tip_target,
            tip_lens,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            review: &self.review[i][..self.review_lens[i]],
            query: &self.query[i][..self.query_lens[i]],
            tip_input: &self.tip_input[i][..self.tip_lens[i]],
            tip_target: &self.tip_target[i][..self.tip_lens[i]],
        }
    }
}

/// Consecutive batches of `batch_size` (last may be smaller), in corpus order
/// or in a seeded permutation.
pub fn make_batches(triplets: &[Triplet], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    if let Some(seed) = shuffle_seed {
        Lcg64::new(seed).shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch::from_triplets(triplets, c.to_vec()))
        .collect())
}
