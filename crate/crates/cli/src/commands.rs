use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use qatip::baselines::{self, BaselineKind, Bm25Params, LeadOptions};
use qatip::corpus::{self, LoadMode, RawRecord, TokenizeMode, Triplet, Vocabulary};
use qatip::evaluation::{self, EvalOptions, EvalRecord};
use qatip::generation::{self, GeneratedTip, RecordId};
use qatip::gradcheck::{self, GradcheckConfig, GradcheckReport};
use qatip::model::{Arch, Variant};
use qatip::train::{self, EpochLog};
use qatip::{BeamConfig, EmbeddingTable, Error, MetricReport, Model, Result};

use crate::checkpoint::{self, Snapshot};
use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "qatip", version, about = "Query-aware tip generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a training JSONL file.
    BuildVocab(BuildVocabArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Decode tips for every record of a JSONL file.
    Generate(GenerateArgs),
    /// Score generated tips against references.
    Evaluate(EvaluateArgs),
    /// Run an extractive baseline.
    Baseline(BaselineArgs),
    /// Finite-difference gradient checks for every op and both model families.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 50_000)]
    pub max_size: usize,
    #[arg(long, default_value = "whitespace")]
    pub mode: TokenizeMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Output directory for checkpoints, vocabulary and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Defaults to the tip length cap stored in the checkpoint.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Generated tips; repeat for one table row per file.
    #[arg(long, required = true)]
    pub hyp: Vec<PathBuf>,
    /// Dataset JSONL with reference tips, aligned line by line with each hypothesis file.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Word vectors in text format; Semantic is omitted without them.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value = "whitespace")]
    pub mode: TokenizeMode,
    /// Count repeated query tokens in Lexicon.
    #[arg(long)]
    pub multiset_lexicon: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub method: BaselineKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Required by `extract_embed`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value = "whitespace")]
    pub mode: TokenizeMode,
    /// `query_lead` without the single-token tier.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Per-op tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// End-to-end model tolerance.
    #[arg(long, default_value_t = 1e-3)]
    pub model_tol: f64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => build_vocab(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Generate(a) => generate(&a, out),
        Command::Evaluate(a) => evaluate(&a, out),
        Command::Baseline(a) => baseline(&a, out),
        Command::Gradcheck(a) => gradcheck_cmd(&a, out),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(msg).map_err(|e| Error::io("<stdout>", e))
}

fn build_vocab(a: &BuildVocabArgs, out: &mut dyn Write) -> Result<()> {
    let records = corpus::load_jsonl(&a.data, LoadMode::Train)?;
    let vocab = corpus::build_vocab(&records, a.mode, a.min_freq, a.max_size)?;
    vocab.save(&a.out)?;
    say(out, format_args!("{}\n", vocab.len()))
}

fn encode_all(records: &[RawRecord], vocab: &Vocabulary, cfg: &RunConfig) -> Vec<Triplet> {
    records
        .iter()
        .map(|r| Triplet::encode(r, vocab, cfg.tokenize, cfg.caps))
        .collect()
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&Overrides {
        arch: a.arch,
        variant: a.variant,
        seed: a.seed,
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
    });
    cfg.validate()?;
    let train_path = cfg.data.train.clone().expect("validated");
    let all = corpus::load_jsonl(&train_path, LoadMode::Train)?;
    let (train_raw, valid_raw, held_out) = match &cfg.data.valid {
        Some(valid) => (all, corpus::load_jsonl(valid, LoadMode::Train)?, None),
        None => {
            let split = corpus::split_dataset(&all, cfg.data.split_seed)?;
            (split.train, split.valid, Some(split.test))
        }
    };
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => corpus::build_vocab(&train_raw, cfg.tokenize, cfg.min_freq, cfg.max_vocab)?,
    };
    let train_set = encode_all(&train_raw, &vocab, &cfg);
    let valid_set = encode_all(&valid_raw, &vocab, &cfg);

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    vocab.save(a.out.join("vocab.txt"))?;
    if let Some(test) = &held_out {
        write_jsonl(&a.out.join("test.jsonl"), test)?;
    }
    let resolved = serde_json::to_string_pretty(&cfg)?;
    let cfg_path = a.out.join("config.json");
    std::fs::write(&cfg_path, resolved + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let model_cfg = cfg.model_config();
    let mut model = Model::new(&model_cfg, vocab.len(), cfg.seed)?;
    let snapshot = Snapshot {
        model: model_cfg,
        vocab_size: vocab.len(),
        tokenize: cfg.tokenize,
        caps: cfg.caps,
    };
    let best_path = a.out.join("best.qtip");
    let final_path = a.out.join("final.qtip");
    checkpoint::save(&best_path, &snapshot, model.params())?;
    say(
        out,
        format_args!(
            "{} {} V={} train={} valid={} params={}\n",
            snapshot.model.arch().as_str(),
            snapshot.model.variant(),
            vocab.len(),
            train_set.len(),
            valid_set.len(),
            model.params().num_scalars()
        ),
    )?;

    let log_path = a.out.join("log.jsonl");
    let mut log = create(&log_path)?;
    let mut best = f64::INFINITY;
    let train_cfg = cfg.train_config();
    train::train(model.as_seq2seq_mut(), &train_set, &valid_set, &train_cfg, |entry: &EpochLog, m| {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        let score = entry.valid_loss.unwrap_or(entry.train_loss);
        if score < best {
            best = score;
            checkpoint::save(&best_path, &snapshot, m.params())?;
        }
        let valid = entry.valid_loss.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
        say(
            out,
            format_args!("epoch {} train {:.4} valid {valid} ({:.1}s)\n", entry.epoch, entry.train_loss, entry.seconds),
        )
    })?;
    drop(log);
    checkpoint::save(&final_path, &snapshot, model.params())?;
    say(out, format_args!("saved {}\n", final_path.display()))
}

fn default_vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new("")).join("vocab.txt")
}

fn generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (snapshot, model) = checkpoint::load(&a.checkpoint)?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| default_vocab_path(&a.checkpoint));
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != snapshot.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary {} has V={} but the checkpoint expects V={}",
            vocab_path.display(),
            vocab.len(),
            snapshot.vocab_size
        )));
    }
    let config = BeamConfig {
        width: a.beam,
        max_len: a.max_len.unwrap_or(snapshot.caps.tip),
        alpha: a.alpha,
        mask_unk: true,
    };
    config.validate()?;
    let records = corpus::load_jsonl(&a.data, LoadMode::Inference)?;
    let triplets: Vec<Triplet> = records
        .iter()
        .map(|r| Triplet::encode(r, &vocab, snapshot.tokenize, snapshot.caps))
        .collect();
    let result = generation::batch_generate(&model, &triplets, &vocab, snapshot.tokenize, &config)?;
    write_jsonl(&a.out, &result.tips)?;
    if let Some((i, e)) = result.failures.into_iter().next() {
        return Err(Error::Data(format!("record {}: {e}", i + 1)));
    }
    say(out, format_args!("wrote {} tips to {}\n", result.tips.len(), a.out.display()))
}

#[derive(serde::Deserialize)]
struct HypLine {
    id: Option<RecordId>,
    tip: String,
}

fn load_hypotheses(path: &Path) -> Result<Vec<HypLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let refs = corpus::load_jsonl(&a.reference, LoadMode::Train)?;
    let table = a.embeddings.as_ref().map(EmbeddingTable::load).transpose()?;
    if let Some(t) = &table {
        if t.duplicates() > 0 {
            log::warn!("{} duplicate embedding rows ignored", t.duplicates());
        }
    }
    let opts = EvalOptions {
        mode: a.mode,
        multiset_lexicon: a.multiset_lexicon,
    };
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    for hyp_path in &a.hyp {
        let hyps = load_hypotheses(hyp_path)?;
        if hyps.len() != refs.len() {
            return Err(Error::Data(format!(
                "{} has {} records but {} has {}",
                hyp_path.display(),
                hyps.len(),
                a.reference.display(),
                refs.len()
            )));
        }
        for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
            if let (Some(RecordId::Name(hid)), Some(rid)) = (&h.id, &r.id) {
                if hid != rid {
                    return Err(Error::Data(format!("record {}: id {hid} does not match reference id {rid}", i + 1)));
                }
            }
        }
        let records: Vec<EvalRecord<'_>> = hyps
            .iter()
            .zip(&refs)
            .map(|(h, r)| EvalRecord {
                tip: &h.tip,
                reference: r.tip.as_deref().unwrap_or_default(),
                query: &r.query,
            })
            .collect();
        let report = evaluation::evaluate_run(&records, table.as_ref(), opts)?;
        let name = hyp_path
            .file_stem()
            .map_or_else(|| hyp_path.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((name, report));
    }
    say(out, format_args!("{}", evaluation::format_table(&rows)))?;
    if let Some(path) = &a.out {
        let map: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
            .collect::<Result<_>>()?;
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &map)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn baseline(a: &BaselineArgs, out: &mut dyn Write) -> Result<()> {
    let records = corpus::load_jsonl(&a.data, LoadMode::Inference)?;
    let params = Bm25Params { k1: a.k1, b: a.b };
    params.validate()?;
    let table = match (a.method, &a.embeddings) {
        (BaselineKind::ExtractEmbed, None) => {
            return Err(Error::Config("extract_embed requires --embeddings".into()));
        }
        (_, Some(p)) => Some(EmbeddingTable::load(p)?),
        (_, None) => None,
    };
    let mut tips = Vec::with_capacity(records.len());
    let mut fallbacks = 0;
    for (i, r) in records.iter().enumerate() {
        let pick = match a.method {
            BaselineKind::QueryLead => baselines::query_lead(
                &r.review,
                &r.query,
                LeadOptions {
                    strict: a.strict,
                    mode: a.mode,
                },
            ),
            BaselineKind::ExtractBm25 => baselines::extract_bm25(&r.review, &r.query, params, a.mode),
            BaselineKind::ExtractEmbed => {
                baselines::extract_embed(&r.review, &r.query, table.as_ref().expect("checked"), a.mode)
            }
        }
        .map_err(|e| Error::Data(format!("record {}: {e}", i + 1)))?;
        fallbacks += usize::from(pick.fallback);
        tips.push(GeneratedTip {
            id: r.id.clone().map_or(RecordId::Index(i), RecordId::Name),
            tip: pick.sentence,
        });
    }
    write_jsonl(&a.out, &tips)?;
    say(
        out,
        format_args!("wrote {} tips to {} ({fallbacks} fell back to the first sentence)\n", tips.len(), a.out.display()),
    )
}

pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>7}  {:>11}  {:>9}  status\n", "name", "checked", "max_rel_err", "tolerance");
    for e in &report.entries {
        s += &format!(
            "{:<width$}  {:>7}  {:>11.3e}  {:>9.1e}  {}\n",
            e.name,
            e.checked,
            e.max_rel_err,
            e.tolerance,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    s
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.eps > 0.0 && a.tol > 0.0 && a.model_tol > 0.0) || a.trials == 0 {
        return Err(Error::Config("eps, tolerances and trials must be positive".into()));
    }
    let cfg = GradcheckConfig {
        eps: a.eps,
        op_tol: a.tol,
        model_tol: a.model_tol,
        trials: a.trials,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    say(out, format_args!("{}", format_gradcheck(&report)))?;
    let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("gradient check failed for {}", failed.join(", "))))
    }
}
