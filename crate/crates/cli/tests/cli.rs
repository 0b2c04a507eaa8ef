use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qatip::corpus::{self, LoadMode, Triplet, Vocabulary};
use qatip::generation::greedy_decode;
use qatip_cli::checkpoint;
use serde_json::Value;

fn qatip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qatip"))
        .args(args)
        .env_remove("QATIP_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qatip(args);
    assert!(
        out.status.success(),
        "qatip {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure and returns the parsed stderr error record.
fn fails(args: &[&str]) -> Value {
    let out = qatip(args);
    assert!(!out.status.success(), "qatip {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr is not a single line: {err}");
    let v: Value = serde_json::from_str(lines[0]).expect("stderr is JSON");
    assert!(v["error"].is_string() && v["message"].is_string());
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"id": "a", "review": "the soup was cold . the bread was fresh", "query": "bread", "tip": "fresh bread"}
{"id": "b", "review": "great view from the top . service was slow", "query": "service", "tip": "slow service"}
{"id": "c", "review": "cheap beer and loud music", "query": "beer", "tip": "cheap beer"}
"#;

fn tiny_dir() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.jsonl");
    std::fs::write(&data, TINY).unwrap();
    (dir, data)
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let body = format!(
        r#"{{"arch": "transformer", "variant": "both", "data": {{"train": "{}", "valid": "{}", "test": "{}"}},
            "transformer": {{"layers": 1, "model_dim": 8, "heads": 2, "ffn_dim": 16, "dropout": 0.0}},
            "rnn": {{"hidden": 4, "embed": 4}},
            "train": {{"batch_size": 2, "adam": {{"lr": 0.01}}}}{extra}}}"#,
        s(data),
        s(data),
        s(data)
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn build_vocab_is_deterministic_and_capped() {
    let (dir, data) = tiny_dir();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    let printed = ok(&["build-vocab", "--data", s(&data), "--out", s(&a)]);
    ok(&["build-vocab", "--data", s(&data), "--out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(printed.trim(), text.lines().count().to_string());
    let c = dir.path().join("c.txt");
    ok(&["build-vocab", "--data", s(&data), "--max-size", "6", "--out", s(&c)]);
    assert_eq!(std::fs::read_to_string(&c).unwrap().lines().count(), 6);
}

#[test]
fn train_zero_epochs_saves_initialized_checkpoint() {
    let (dir, data) = tiny_dir();
    let cfg = write_config(dir.path(), &data, "");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "0"]);
    assert_eq!(std::fs::read_to_string(out.join("log.jsonl")).unwrap(), "");
    let (snap, model) = checkpoint::load(out.join("final.qtip")).unwrap();
    assert_eq!(snap.vocab_size, Vocabulary::load(out.join("vocab.txt")).unwrap().len());
    let fresh = qatip::Model::new(&snap.model, snap.vocab_size, 0).unwrap();
    for (a, b) in model.params().iter().zip(fresh.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_is_deterministic_and_logs_lines() {
    let (dir, data) = tiny_dir();
    let cfg = write_config(dir.path(), &data, "");
    let mut logs = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        ok(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "3", "--arch", "rnn", "--variant", "qa_dec"]);
        let text = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
        let losses: Vec<(f64, f64)> = text
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                assert!(v["seconds"].is_number() && v["epoch"].is_u64());
                (v["train_loss"].as_f64().unwrap(), v["valid_loss"].as_f64().unwrap())
            })
            .collect();
        assert_eq!(losses.len(), 3);
        logs.push(losses);
        assert_eq!(
            std::fs::read(out.join("final.qtip")).unwrap().len(),
            std::fs::read(out.join("best.qtip")).unwrap().len()
        );
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn generate_beam_one_matches_greedy_and_keeps_line_count() {
    let (dir, data) = tiny_dir();
    let cfg = write_config(dir.path(), &data, "");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "2"]);
    let ckpt = out.join("final.qtip");
    let gen = dir.path().join("gen.jsonl");
    ok(&["generate", "--checkpoint", s(&ckpt), "--data", s(&data), "--beam", "1", "--max-len", "6", "--out", s(&gen)]);
    let produced = std::fs::read_to_string(&gen).unwrap();
    assert_eq!(produced.lines().count(), TINY.lines().count());

    let (snap, model) = checkpoint::load(&ckpt).unwrap();
    let vocab = Vocabulary::load(out.join("vocab.txt")).unwrap();
    let mut expected = String::new();
    for r in corpus::load_jsonl(&data, LoadMode::Inference).unwrap() {
        let t = Triplet::encode(&r, &vocab, snap.tokenize, snap.caps);
        let ids = greedy_decode(&model, &t.review, &t.query, 6, true).unwrap();
        let tip = corpus::detokenize(&vocab.decode(&ids), snap.tokenize);
        expected += &serde_json::json!({"id": r.id.unwrap(), "tip": tip}).to_string();
        expected.push('\n');
    }
    assert_eq!(produced, expected);
}

#[test]
fn vocabulary_mismatch_names_both_sizes() {
    let (dir, data) = tiny_dir();
    let cfg = write_config(dir.path(), &data, "");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "0"]);
    let small = dir.path().join("small.txt");
    ok(&["build-vocab", "--data", s(&data), "--max-size", "6", "--out", s(&small)]);
    let v = Vocabulary::load(out.join("vocab.txt")).unwrap().len();
    let err = fails(&[
        "generate", "--checkpoint", s(&out.join("final.qtip")), "--vocab", s(&small), "--data", s(&data), "--out",
        s(&dir.path().join("g.jsonl")),
    ]);
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("V=6") && msg.contains(&format!("V={v}")), "{msg}");
}

#[test]
fn query_lead_picks_follow_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(
        &data,
        concat!(
            r#"{"review": "Parking is easy. The pasta was superb! Dessert too.", "query": "pasta"}"#,
            "\n",
            r#"{"review": "Nice staff. Loud room, sadly.", "query": "loud music"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("lead.jsonl");
    ok(&["baseline", "--method", "query_lead", "--data", s(&data), "--out", s(&out)]);
    let tips: Vec<String> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["tip"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(tips, ["The pasta was superb!", "Loud room, sadly."]);
}

#[test]
fn evaluate_identical_prints_full_bleu_and_writes_report() {
    let (dir, data) = tiny_dir();
    let report = dir.path().join("report.json");
    let printed = ok(&["evaluate", "--hyp", s(&data), "--ref", s(&data), "--out", s(&report)]);
    assert!(printed.lines().next().unwrap().contains("BLEU"));
    assert!(printed.contains("100.00"), "{printed}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["tiny"]["bleu"].as_f64(), Some(100.0));
}

#[test]
fn gradcheck_lists_every_op_and_passes() {
    let out = ok(&["gradcheck"]);
    for op in ["matmul", "softmax_rows_masked", "layer_norm", "nll_loss", "embedding"] {
        assert!(out.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op} missing:\n{out}");
    }
    assert!(!out.contains("FAIL"));
    let v = fails(&["gradcheck", "--tol", "1e-30", "--trials", "2"]);
    assert!(v["message"].as_str().unwrap().contains("gradient check failed"));
}

#[test]
fn failures_emit_one_json_line() {
    let (dir, data) = tiny_dir();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{TINY}{{\"review\": \"x\"}}\n")).unwrap();
    let v = fails(&["build-vocab", "--data", s(&bad), "--out", s(&dir.path().join("v.txt"))]);
    assert_eq!(v["error"], "data");
    assert!(v["message"].as_str().unwrap().contains("line 4: missing field query"));

    let v = fails(&["build-vocab", "--data", s(&dir.path().join("nope.jsonl")), "--out", "v.txt"]);
    assert_eq!(v["error"], "io");

    let cfg = write_config(dir.path(), &data, r#", "learning_rate": 1"#);
    let v = fails(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(v["error"], "config");
    assert!(!dir.path().join("r").exists());

    let v = fails(&["generate", "--checkpoint", s(&data), "--data", s(&data), "--out", "x.jsonl"]);
    assert!(v["message"].as_str().unwrap().contains("magic"));

    assert_eq!(fails(&["no-such-command"])["error"], "usage");

    let out = Command::new(env!("CARGO_BIN_EXE_qatip"))
        .args(["evaluate", "--hyp", s(&data), "--ref", s(&data)])
        .env("QATIP_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "config");
}

#[test]
fn thread_count_does_not_change_outputs() {
    let (dir, data) = tiny_dir();
    let cfg = write_config(dir.path(), &data, "");
    let mut finals = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_qatip"))
            .args(["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "2"])
            .env("QATIP_THREADS", threads)
            .output()
            .unwrap();
        assert!(status.status.success());
        finals.push(std::fs::read(out.join("final.qtip")).unwrap());
    }
    assert_eq!(finals[0], finals[1]);
}
