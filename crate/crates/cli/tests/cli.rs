use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: [&str; 16] = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ff=32",
    "--set",
    "model.max_len=16",
    "--set",
    "train.learning_rate=0.001",
    "--set",
    "train.epochs=2",
    "--set",
    "data.n_train=8",
    "--set",
    "pretrain.examples=16",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dialogemo"))
        .args(args)
        .env_remove("DIALOGEMO_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Twelve four-turn dialogues where one keyword gives away each label.
fn keyword_dialogues(dir: &Path) -> PathBuf {
    let words = [("anger", "furious"), ("joy", "wonderful"), ("neutral", "tuesday"), ("sadness", "miserable")];
    let speakers = ["Ross", "Rachel", "Gunther"];
    let dialogues: Vec<serde_json::Value> = (0..12)
        .map(|d| {
            (0..4)
                .map(|t| {
                    let (label, word) = words[(d + t) % 4];
                    serde_json::json!({
                        "speaker": speakers[(d + t) % 3],
                        "utterance": format!("it was {word} today"),
                        "emotion": label,
                    })
                })
                .collect()
        })
        .collect();
    let path = dir.join("dialogues.json");
    fs::write(&path, serde_json::to_string(&dialogues).unwrap()).unwrap();
    path
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(TINY);
    v
}

#[test]
fn no_arguments_is_a_usage_error() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn prep_renders_table_rows() {
    let input = fixture("table_dialogues.json");
    let expected: Vec<String> = fs::read_to_string(fixture("table_rows.txt")).unwrap().lines().map(String::from).collect();
    let plain = run(&["prep", "--input", s(&input), "--render", "--set", "prep.personality_tokens=false"]);
    assert_eq!(plain.status.code(), Some(0));
    let tokens = run(&["prep", "--input", s(&input), "--render"]);
    let plain: Vec<String> = stdout(&plain).lines().map(String::from).collect();
    let tokens: Vec<String> = stdout(&tokens).lines().map(String::from).collect();
    assert_eq!(plain[..3], expected[..3]);
    assert_eq!(tokens[3..], expected[3..]);
}

#[test]
fn prep_writes_pair_records() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("pairs.jsonl");
    let o = run(&["prep", "--input", s(&fixture("table_dialogues.json")), "--eval-labels", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(rows.iter().all(|r| ["anger", "joy", "neutral", "sadness"].contains(&r["label"].as_str().unwrap())));
    assert_eq!(rows[0]["target"], "[Joey] [says] Nothing!");
}

#[test]
fn bad_data_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "[[{\"speaker\": \"A\"").unwrap();
    assert_eq!(run(&["ingest", "--input", s(&broken)]).status.code(), Some(2));
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"[[{"speaker": "A", "utterance": "hi", "emotion": "smug"}]]"#).unwrap();
    let o = run(&["ingest", "--input", s(&unknown)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("smug"));
    assert_eq!(run(&["ingest", "--input", s(&dir.path().join("missing.json"))]).status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_one() {
    let input = fixture("table_dialogues.json");
    assert_eq!(run(&["ingest", "--input", s(&input), "--set", "nope=1"]).status.code(), Some(1));
    assert_eq!(run(&["ingest", "--input", s(&input), "--dataset", "reddit"]).status.code(), Some(1));
    assert_eq!(run(&["ingest"]).status.code(), Some(1));
}

#[test]
fn ingest_prints_label_counts() {
    let o = run(&["ingest", "--input", s(&fixture("table_dialogues.json"))]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("dialogues   2"));
    assert!(out.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["sadness", "2"]));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = keyword_dialogues(dir.path());
    let vocab = dir.path().join("vocab.txt");
    assert_eq!(run(&["vocab", "--input", s(&data), "--out", s(&vocab)]).status.code(), Some(0));

    let dry = dir.path().join("dry.cek");
    let o = run(&with_tiny(&["train", "--input", s(&data), "--vocab", s(&vocab), "--out", s(&dry), "--dry-run"]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("dry run"));
    assert!(!dry.exists());

    let (a, b) = (dir.path().join("a.cek"), dir.path().join("b.cek"));
    let metrics = dir.path().join("metrics.jsonl");
    for (out, m) in [(&a, Some(&metrics)), (&b, None)] {
        let mut args = with_tiny(&["train", "--input", s(&data), "--vocab", s(&vocab), "--out", s(out), "--seed", "5"]);
        if let Some(m) = m {
            args.extend(["--metrics", s(m)]);
        }
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(a.with_extension("toml").exists());
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 2);

    let eval = run(&["eval", "--checkpoint", s(&a), "--vocab", s(&vocab), "--input", s(&data), "--split", "val", "--set", "data.n_train=8"]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let table = stdout(&eval);
    assert!(table.lines().next().unwrap().contains("precision"));
    for row in ["Anger", "Joy", "Neutral", "Sadness", "Micro AVG", "Macro AVG", "Weighted AVG"] {
        assert!(table.contains(row), "{row} missing from\n{table}");
    }
    let json = run(&["eval", "--checkpoint", s(&a), "--vocab", s(&vocab), "--input", s(&data), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert!(report["micro"]["f1"].as_f64().is_some());

    let unlabeled = dir.path().join("unlabeled.json");
    fs::write(&unlabeled, r#"[[{"speaker": "Ross", "utterance": "so miserable"}, {"speaker": "Joey", "utterance": "it was tuesday"}]]"#).unwrap();
    let pred = run(&["predict", "--checkpoint", s(&a), "--vocab", s(&vocab), "--input", s(&unlabeled)]);
    assert_eq!(pred.status.code(), Some(0), "{}", String::from_utf8_lossy(&pred.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&pred)).unwrap();
    for turn in doc[0].as_array().unwrap() {
        assert!(["anger", "joy", "neutral", "sadness"].contains(&turn["prediction"].as_str().unwrap()));
    }

    let other = dir.path().join("other.txt");
    fs::write(&other, fs::read_to_string(&vocab).unwrap() + "extra\n").unwrap();
    assert_eq!(run(&["eval", "--checkpoint", s(&a), "--vocab", s(&other), "--input", s(&data)]).status.code(), Some(2));
}

#[test]
fn pretraining_commands_write_checkpoints() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("scenes.txt");
    fs::write(&corpus, "where were you\ni was at work\n\nwho ate my sandwich\nnot me\nit was joey\n\nsee you later\nbye\n").unwrap();
    let data = keyword_dialogues(dir.path());
    let vocab = dir.path().join("vocab.txt");
    let tweets = fixture("tweets_20.tsv");
    let o = run(&["vocab", "--input", s(&data), "--corpus", s(&corpus), "--tweets", s(&tweets), "--out", s(&vocab)]);
    assert_eq!(o.status.code(), Some(0));

    let mlm = dir.path().join("mlm.cek");
    let o = run(&with_tiny(&["pretrain", "mlm-nsp", "--corpus", s(&corpus), "--vocab", s(&vocab), "--out", s(&mlm)]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("epoch")).count(), 2);

    let tw = dir.path().join("tweets.cek");
    let o = run(&with_tiny(&["pretrain", "tweets", "--tweets", s(&tweets), "--vocab", s(&vocab), "--init", s(&mlm), "--out", s(&tw)]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("16 of 20 tweets kept"));

    let fin = dir.path().join("final.cek");
    let o = run(&with_tiny(&["train", "--input", s(&data), "--vocab", s(&vocab), "--init", s(&tw), "--out", s(&fin)]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let dry = dir.path().join("none.cek");
    let o = run(&with_tiny(&["pretrain", "tweets", "--tweets", s(&tweets), "--vocab", s(&vocab), "--out", s(&dry), "--dry-run"]));
    assert_eq!(o.status.code(), Some(0));
    assert!(!dry.exists());
}

#[test]
fn config_file_and_env_are_read() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("paths.train = {:?}\n", s(&fixture("table_dialogues.json")))).unwrap();
    let o = run(&["ingest", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_dialogemo")).arg("ingest").env("DIALOGEMO_CONFIG", &cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("dialogues   2"));
}
