//! End-to-end tests driving the `medmark` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medmark_core::corpus::{load_dataset, DatasetKind};
use medmark_core::report::strip_tags;

fn medmark() -> Command {
    Command::new(env!("CARGO_BIN_EXE_medmark"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(command: &mut Command) -> Output {
    command.output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).unwrap()
}

#[test]
fn unknown_subcommand_exits_two() {
    let output = run(medmark().arg("frobnicate"));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_required_input_exits_two() {
    let output = run(medmark().arg("ingest"));
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("--data"), "stderr: {stderr}");
}

#[test]
fn unreadable_data_exits_one() {
    let output = run(medmark().args(["ingest", "--data", "/nonexistent/nope.jsonl"]));
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}

#[test]
fn ingest_prints_summary_and_logs_config() {
    let output = run(medmark()
        .arg("ingest")
        .arg("--data")
        .arg(fixture("synthetic/train.jsonl")));
    let out = stdout(&output);
    assert!(out.contains("conversations = 40"), "stdout: {out}");
    assert!(out.contains("category skin ="), "stdout: {out}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("command = ingest"), "stderr: {stderr}");
    assert!(stderr.contains("kind = highlighting"), "stderr: {stderr}");
}

#[test]
fn config_file_fills_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "seed = 7\ntrain_chats = 2\ntest_chats = 1\ndim = 4\n").unwrap();

    let from_file = run(medmark()
        .arg("synth")
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.path().join("a")));
    let stderr = String::from_utf8_lossy(&from_file.stderr);
    assert!(stderr.contains("seed = 7"), "stderr: {stderr}");
    assert!(stderr.contains("train_chats = 2"), "stderr: {stderr}");

    let flag_wins = run(medmark()
        .arg("synth")
        .arg("--config")
        .arg(&config)
        .arg("--seed")
        .arg("9")
        .arg("--out-dir")
        .arg(dir.path().join("b")));
    let stderr = String::from_utf8_lossy(&flag_wins.stderr);
    assert!(stderr.contains("seed = 9"), "stderr: {stderr}");
}

#[test]
fn report_reproduces_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.html");
    let output = run(medmark()
        .arg("report")
        .arg("--data")
        .arg(fixture("report_chat.jsonl"))
        .arg("--scores")
        .arg(fixture("report_scores.json"))
        .args(["--chat", "demo-001"])
        .arg("--out")
        .arg(&out));
    stdout(&output);
    let rendered = std::fs::read(&out).unwrap();
    let golden = std::fs::read(fixture("golden_report.html")).unwrap();
    assert_eq!(rendered, golden, "report output differs from the golden file");
}

#[test]
fn highlight_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("tfidf.json");
    let scores = dir.path().join("scores.json");
    let html_path = dir.path().join("chat.html");

    stdout(&run(medmark()
        .args(["train", "tfidf"])
        .arg("--data")
        .arg(fixture("synthetic/train.jsonl"))
        .arg("--out")
        .arg(&model)));
    stdout(&run(medmark()
        .arg("highlight")
        .args(["--model", "tfidf"])
        .arg("--model-file")
        .arg(&model)
        .arg("--data")
        .arg(fixture("synthetic/test.jsonl"))
        .args(["--chat", "test-0000"])
        .arg("--out")
        .arg(&scores)));
    stdout(&run(medmark()
        .arg("report")
        .arg("--data")
        .arg(fixture("synthetic/test.jsonl"))
        .arg("--scores")
        .arg(&scores)
        .args(["--chat", "test-0000"])
        .arg("--out")
        .arg(&html_path)));

    // The rendered page must still contain the full conversation text.
    let html = std::fs::read_to_string(&html_path).unwrap();
    let stripped = strip_tags(&html);
    let conversations =
        load_dataset(&fixture("synthetic/test.jsonl"), DatasetKind::Highlighting).unwrap();
    let conversation = conversations.iter().find(|c| c.id == "test-0000").unwrap();
    for message in &conversation.messages {
        let text = message.preprocessed();
        assert!(stripped.contains(&text), "missing {text:?}");
    }
}

#[test]
fn evaluate_emits_five_model_rows() {
    let output = run(medmark()
        .arg("evaluate")
        .arg("--data-root")
        .arg(fixture("synthetic"))
        .args(["--train", "train.jsonl", "--test", "test.jsonl"])
        .args(["--medical-terms", "medical_terms.txt"])
        .args(["--non-medical-terms", "non_medical_terms.txt"])
        .args(["--embeddings", "embeddings.txt"])
        .args(["--hidden", "8", "--pretrain-epochs", "2", "--finetune-epochs", "2"])
        .args(["--lime-samples", "150", "--classifier-epochs", "40"])
        .args(["--seed", "0"]));
    let csv = stdout(&output);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,threshold,precision,recall,roc_auc,pr_auc");
    let models: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        models,
        ["tfidf", "lr+lime", "svm+lime", "unigram-tagger", "ngram-tagger"]
    );
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6, "bad row {line:?}");
        for value in &fields[1..] {
            value.parse::<f64>().expect("numeric metric");
        }
    }
}

#[test]
fn curve_csv_covers_both_modes() {
    let output = run(medmark()
        .arg("curve")
        .arg("--data-root")
        .arg(fixture("synthetic"))
        .args(["--train", "train.jsonl", "--test", "test.jsonl"])
        .args(["--medical-terms", "medical_terms.txt"])
        .args(["--non-medical-terms", "non_medical_terms.txt"])
        .args(["--embeddings", "embeddings.txt"])
        .args(["--hidden", "6", "--pretrain-epochs", "1", "--epochs", "1"])
        .args(["--step", "20", "--seed", "0"]));
    let csv = stdout(&output);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,pr_auc,mode");
    let expected = [
        ("0", "unigram"),
        ("20", "unigram"),
        ("40", "unigram"),
        ("0", "ngram"),
        ("20", "ngram"),
        ("40", "ngram"),
    ];
    assert_eq!(lines.len(), expected.len() + 1);
    for (line, (n, mode)) in lines[1..].iter().zip(expected) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], n);
        assert_eq!(fields[2], mode);
        fields[1].parse::<f64>().expect("numeric pr_auc");
    }
}

#[test]
fn agreement_handles_perfect_and_total_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let chat = |gold: &str| {
        format!(
            r#"{{"id": "c1", "messages": [{{"role": "patient", "text": "a b c d", "gold": {gold}}}]}}"#
        ) + "\n"
    };
    std::fs::write(&a, chat("[0, 1, 0, 1]")).unwrap();

    std::fs::write(&b, chat("[0, 1, 0, 1]")).unwrap();
    let output = run(medmark().arg("agreement").arg(&a).arg(&b));
    let out = stdout(&output);
    assert!(out.contains("alpha = 1.000000"), "stdout: {out}");

    // Flipping every label with balanced categories is the classic
    // total-disagreement case.
    std::fs::write(&b, chat("[1, 0, 1, 0]")).unwrap();
    let output = run(medmark().arg("agreement").arg(&a).arg(&b));
    let out = stdout(&output);
    assert!(out.contains("alpha = -1.000000"), "stdout: {out}");

    let output = run(medmark().arg("agreement").arg(&a));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn redacted_copy_masks_patterns_and_drops_gold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("redacted.jsonl");
    let output = run(medmark()
        .arg("ingest")
        .arg("--data")
        .arg(fixture("synthetic/test.jsonl"))
        .arg("--redact")
        .arg(fixture("redaction_rules.json"))
        .arg("--out")
        .arg(&out));
    stdout(&output);
    let copy = std::fs::read_to_string(&out).unwrap();
    assert!(copy.contains("[[NUMBER]]"), "numbers not redacted");
    assert!(!copy.contains("\"gold\""), "gold labels must be dropped");
    // The copy still loads as a plain dataset.
    assert!(load_dataset(&out, DatasetKind::Plain).is_ok());
}

#[test]
fn explain_attributes_every_token() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("clf.json");
    stdout(&run(medmark()
        .args(["train", "classifier"])
        .arg("--data")
        .arg(fixture("synthetic/train.jsonl"))
        .args(["--epochs", "60"])
        .arg("--out")
        .arg(&model)));
    let output = run(medmark()
        .arg("explain")
        .arg("--model-file")
        .arg(&model)
        .arg("--data")
        .arg(fixture("synthetic/test.jsonl"))
        .args(["--chat", "test-0003", "--message", "0", "--lime-samples", "200"]));
    let value: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    let explanation = &value["explanations"][0];
    let tokens = explanation["tokens"].as_array().unwrap();
    let weights = explanation["word_weights"].as_array().unwrap();
    assert_eq!(tokens.len(), weights.len());
    assert!(explanation["target_class"].is_string());
    assert!(explanation["fidelity_r2"].is_number());
}
