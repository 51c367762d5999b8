use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sessml::eval::Recommender;
use sessml::index::{ModelArtifact, SmlRecommender};
use tempfile::TempDir;

fn sessml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sessml"))
        .args(args)
        .env_remove("SML_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sessml(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Six sessions; `s3` is a single rare event, `s6` holds an empty item and a
/// bad timestamp.
const TINY_CSV: &str = "\
session_id,timestamp,item_id
s1,1,a
s1,2,b
s1,3,c
s2,10,a
s2,11,b
s3,20,z
s4,30,b
s4,31,c
s4,32,a
s5,40,a
s5,41,b
s6,50,c
s6,51,
s6,xx,a
s6,52,a
";

fn preprocess_tiny(dir: &Path) -> PathBuf {
    let csv = dir.join("tiny.csv");
    fs::write(&csv, TINY_CSV).unwrap();
    let out = dir.join("data");
    ok(&[
        "preprocess",
        "--input",
        s(&csv),
        "--out-dir",
        s(&out),
        "--min-item-count",
        "2",
        "--test-fraction",
        "0.2",
    ]);
    out
}

#[test]
fn preprocess_summary_matches_hand_count() {
    let dir = TempDir::new().unwrap();
    let data = preprocess_tiny(dir.path());
    let summary: Value = serde_json::from_str(&fs::read_to_string(data.join("summary.json")).unwrap()).unwrap();
    let counts = |k: &str| {
        let c = &summary[k];
        (
            c["events"].as_u64().unwrap(),
            c["sessions"].as_u64().unwrap(),
            c["items"].as_u64().unwrap(),
        )
    };
    assert_eq!(summary["rows"], 15);
    assert_eq!(summary["skipped_rows"], 2);
    assert_eq!(summary["bad_timestamps"], 1);
    assert_eq!(counts("raw"), (13, 6, 4));
    // z occurs once, so s3 disappears
    assert_eq!(counts("preprocessed"), (12, 5, 3));
    assert_eq!(counts("train"), (10, 4, 3));
    assert_eq!(counts("test"), (2, 1, 3));
    let test = fs::read_to_string(data.join("test.jsonl")).unwrap();
    assert!(test.contains("\"s6\"") && test.lines().count() == 1);
}

#[test]
fn preprocess_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let first = preprocess_tiny(dir.path());
    let saved: Vec<Vec<u8>> = ["train.jsonl", "test.jsonl", "vocab.tsv", "summary.json"]
        .iter()
        .map(|f| fs::read(first.join(f)).unwrap())
        .collect();
    let again = preprocess_tiny(dir.path());
    for (f, bytes) in ["train.jsonl", "test.jsonl", "vocab.tsv", "summary.json"]
        .iter()
        .zip(saved)
    {
        assert_eq!(fs::read(again.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn preprocess_rejects_empty_input() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = sessml(&[
        "preprocess",
        "--input",
        s(&empty),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let header_only = dir.path().join("header.csv");
    fs::write(&header_only, "session_id,timestamp,item_id\n").unwrap();
    let out = sessml(&[
        "preprocess",
        "--input",
        s(&header_only),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pop_evaluation_matches_hand_computation() {
    let dir = TempDir::new().unwrap();
    let data = preprocess_tiny(dir.path());
    let run = |cutoff: &str| -> Value {
        let out = ok(&[
            "evaluate",
            "--method",
            "POP",
            "--train",
            s(&data.join("train.jsonl")),
            "--vocab",
            s(&data.join("vocab.tsv")),
            "--test",
            s(&data.join("test.jsonl")),
            "--cutoff",
            cutoff,
            "--json",
        ]);
        serde_json::from_str(&out).unwrap()
    };
    // train counts a 4, b 4, c 2 -> POP list [a, b, c]; one point: prefix [c], next a
    let r = run("2");
    assert_eq!(r["measurement_points"], 1);
    assert_eq!(r["mrr"], 1.0);
    assert_eq!(r["hit_rate"], 1.0);
    assert_eq!(r["precision"], 0.5);
    assert_eq!(r["recall"], 1.0);
    assert_eq!(r["map"], 1.0);
    assert_eq!(r["coverage"], 2);
    // at cutoff 1 the list is exactly the ground truth
    let r = run("1");
    for k in ["map", "precision", "recall", "hit_rate", "mrr"] {
        assert_eq!(r[k], 1.0, "{k}");
    }
}

#[test]
fn evaluate_reports_missing_model_and_unknown_method() {
    let dir = TempDir::new().unwrap();
    let data = preprocess_tiny(dir.path());
    let test = data.join("test.jsonl");
    let missing = format!("SML:{}", s(&dir.path().join("nope.bin")));
    assert_eq!(
        sessml(&["evaluate", "--method", &missing, "--test", s(&test)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sessml(&["evaluate", "--method", "GRU4REC", "--test", s(&test)])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        sessml(&["evaluate", "--method", "POP", "--test", s(&test)])
            .status
            .code(),
        Some(1)
    );
}

/// 50 sessions walking a 10-item cycle.
fn toy_cycle(dir: &Path) -> PathBuf {
    let mut csv = String::from("session_id,timestamp,item_id\n");
    for k in 0..50u64 {
        let start = (k * 7) % 10;
        for j in 0..2 + k % 5 {
            csv += &format!("t{k:02},{},{}\n", k * 100 + j, (start + j) % 10);
        }
    }
    let p = dir.join("toy.csv");
    fs::write(&p, csv).unwrap();
    let out = dir.join("toy");
    ok(&["preprocess", "--input", s(&p), "--out-dir", s(&out)]);
    out
}

fn train_toy(data: &Path, model: &Path, extra: &[&str]) -> Output {
    let (train, vocab) = (data.join("train.jsonl"), data.join("vocab.tsv"));
    let mut args = vec![
        "train",
        "--train",
        s(&train),
        "--vocab",
        s(&vocab),
        "--model",
        s(model),
        "--dim",
        "16",
        "--epochs",
        "3",
    ];
    args.extend_from_slice(extra);
    sessml(&args)
}

#[test]
fn trained_model_loads_and_serves() {
    let dir = TempDir::new().unwrap();
    let data = toy_cycle(dir.path());
    let model = dir.path().join("m.sml");
    let history = dir.path().join("h.csv");
    let out = train_toy(&data, &model, &["--history", s(&history)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("SML-MaxPool-Triplet"));
    let hist = fs::read_to_string(&history).unwrap();
    assert!(hist.starts_with("epoch,train_loss,val_rec20,lr"));

    let artifact = ModelArtifact::load(&model).unwrap();
    assert_eq!(artifact.name, "SML-MaxPool-Triplet");

    let report: Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--method",
        &format!("SML:{}", s(&model)),
        "--test",
        s(&data.join("test.jsonl")),
        "--json",
    ]))
    .unwrap();
    assert_eq!(report["method"], "SML-MaxPool-Triplet");
    assert!(report["measurement_points"].as_u64().unwrap() > 0);

    // recommend lists exactly what the evaluator's recommender ranks
    let lines = ok(&["recommend", "--model", s(&model), "-n", "5", "3", "4"]);
    let rows: Vec<Vec<&str>> = lines.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 5);
    let prefix = [
        artifact.vocab.index_of("3").unwrap(),
        artifact.vocab.index_of("4").unwrap(),
    ];
    let vocab = artifact.vocab.clone();
    let rec = SmlRecommender::new(artifact.model).unwrap();
    let want = rec.recommend_scored(&prefix, 5).unwrap();
    assert_eq!(
        rec.recommend(&prefix, 5).unwrap(),
        want.iter().map(|w| w.0).collect::<Vec<_>>()
    );
    for (n, (row, (item, score))) in rows.iter().zip(&want).enumerate() {
        assert_eq!(row[0], (n + 1).to_string());
        assert_eq!(row[1], vocab.id(*item));
        assert_eq!(row[2], format!("{score:.6}"));
    }
}

#[test]
fn recommend_handles_unknown_ids() {
    let dir = TempDir::new().unwrap();
    let data = toy_cycle(dir.path());
    let model = dir.path().join("m.sml");
    assert!(train_toy(&data, &model, &[]).status.success());

    let out = sessml(&["recommend", "--model", s(&model), "-n", "3", "nope", "5"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = sessml(&["recommend", "--model", s(&model), "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn fixed_seed_gives_identical_model_bytes() {
    let dir = TempDir::new().unwrap();
    let data = toy_cycle(dir.path());
    let (a, b) = (dir.path().join("a.sml"), dir.path().join("b.sml"));
    assert!(train_toy(&data, &a, &["--seed", "9"]).status.success());
    assert!(train_toy(&data, &b, &["--seed", "9"]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn invalid_flag_combinations_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let data = toy_cycle(dir.path());
    let model = dir.path().join("m.sml");
    let bad: [&[&str]; 4] = [
        &[
            "--encoder",
            "textcnn",
            "--max-session-length",
            "4",
            "--conv-filters",
            "1,5",
        ],
        &["--loss", "ncas", "--kld-direction", "model-target", "--smoothing", "0"],
        &["--batch-size", "0"],
        &["--encoder", "transformer"],
    ];
    for extra in bad {
        let out = train_toy(&data, &model, extra);
        assert_eq!(
            out.status.code(),
            Some(1),
            "{extra:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(!model.exists());
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["train", "--help"]);
    for needle in [
        "[default: 400]",
        "[default: 0.001]",
        "[default: 32]",
        "[default: 0.3]",
        "[default: 8]",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
}
