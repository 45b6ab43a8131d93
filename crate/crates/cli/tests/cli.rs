use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use darer_core::data::load_corpus;

fn darer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: u64, n: usize) -> PathBuf {
    let path = dir.join(name);
    let o = darer(&[
        "gen",
        "--out",
        p(&path),
        "--seed",
        &seed.to_string(),
        "--dialogs",
        &n.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

fn write_config(dir: &Path, train: &Path, valid: &Path) -> PathBuf {
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[data]\ntrain = {:?}\nvalid = {:?}\n\n[model]\nhidden_dim = 8\nembed_dim = 8\nT = 2\n\n[train]\nepochs = 2\nbatch_size = 4\n",
            train.file_name().unwrap(),
            valid.file_name().unwrap()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn gen_is_deterministic_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", 4, 12);
    let b = gen(dir.path(), "b.jsonl", 4, 12);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let corpus = load_corpus(&a).unwrap();
    assert_eq!(corpus.dialogs.len(), 12);
    assert_eq!(corpus.labels.n_sentiments(), 3);

    let empty = gen(dir.path(), "empty.jsonl", 4, 0);
    let text = std::fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(load_corpus(&empty).unwrap().dialogs.is_empty());
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.jsonl", 1, 16);
    let valid = gen(dir.path(), "valid.jsonl", 2, 6);
    let cfg = write_config(dir.path(), &train, &valid);
    let out = dir.path().join("run");
    let o = darer(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best epoch"));
    let ck = out.join("checkpoint.json");
    assert!(ck.exists());
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(out.join("metrics.json").exists());

    let e1 = darer(&["eval", "--checkpoint", p(&ck), "--data", p(&valid)]);
    assert!(
        e1.status.success(),
        "{}",
        String::from_utf8_lossy(&e1.stderr)
    );
    let e2 = darer(&["eval", "--checkpoint", p(&ck), "--data", p(&valid)]);
    assert_eq!(e1.stdout, e2.stdout);
    let last = stdout(&e1).lines().last().unwrap().to_string();
    let parsed: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert!(parsed["sentiment"]["f1"].is_number());

    let m = darer(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&valid),
        "--convention",
        "mastodon",
    ]);
    assert!(m.status.success());
    let bad = darer(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&valid),
        "--convention",
        "micro",
    ]);
    assert_eq!(bad.status.code(), Some(2));

    let pred = darer(&["predict", "--checkpoint", p(&ck), "--data", p(&valid)]);
    assert!(pred.status.success());
    let lines: Vec<serde_json::Value> = stdout(&pred)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    let corpus = load_corpus(&valid).unwrap();
    assert_eq!(
        lines[0]["acts"].as_array().unwrap().len(),
        corpus.dialogs[0].len()
    );
}

#[test]
fn t_zero_override_logs_zero_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.jsonl", 1, 8);
    let valid = gen(dir.path(), "valid.jsonl", 2, 4);
    let cfg = write_config(dir.path(), &train, &valid);
    let out = dir.path().join("run");
    let o = darer(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--set",
        "T=0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["loss_constraint_S"], 0.0);
        assert_eq!(v["loss_constraint_A"], 0.0);
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.jsonl", 1, 4);
    let missing = dir.path().join("nope.jsonl");
    let cfg = write_config(dir.path(), &train, &missing);
    let o = darer(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let valid = gen(dir.path(), "valid.jsonl", 2, 4);
    let cfg = write_config(dir.path(), &train, &valid);
    for set in ["bogus=1", "hidden_dim=7", "T"] {
        let o = darer(&["train", "--config", p(&cfg), "--set", set]);
        assert_eq!(o.status.code(), Some(2), "--set {set}");
    }
    assert_eq!(darer(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn inspect_graph_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.jsonl");
    std::fs::write(
        &data,
        concat!(
            r#"{"id":"five","utterances":["#,
            r#"{"speaker":1,"tokens":["a"],"sentiment":"Neutral","act":"Statement"},"#,
            r#"{"speaker":2,"tokens":["b"],"sentiment":"Neutral","act":"Statement"},"#,
            r#"{"speaker":1,"tokens":["c"],"sentiment":"Neutral","act":"Statement"},"#,
            r#"{"speaker":2,"tokens":["d"],"sentiment":"Neutral","act":"Statement"},"#,
            r#"{"speaker":1,"tokens":["e"],"sentiment":"Neutral","act":"Statement"}]}"#,
            "\n",
            r#"{"id":"three","utterances":["#,
            r#"{"speaker":1,"tokens":["a"],"sentiment":"Neutral","act":"Statement"},"#,
            r#"{"speaker":2,"tokens":["b"],"sentiment":"Neutral","act":"Statement"},"#,
            r#"{"speaker":1,"tokens":["c"],"sentiment":"Neutral","act":"Statement"}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let total = |o: &Output| -> usize {
        let s = stdout(o);
        let line = s.lines().find(|l| l.starts_with("total:")).unwrap();
        line["total:".len()..].trim().parse().unwrap()
    };
    let dot = dir.path().join("g.dot");
    let o = darer(&[
        "inspect-graph",
        "--data",
        p(&data),
        "--dialog",
        "five",
        "--which",
        "satg",
        "--out",
        p(&dot),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(total(&o), 20);
    let dot_text = std::fs::read_to_string(&dot).unwrap();
    assert!(dot_text.starts_with("digraph"));
    assert_eq!(dot_text.matches("->").count(), 20);

    let o = darer(&[
        "inspect-graph",
        "--data",
        p(&data),
        "--dialog",
        "three",
        "--which",
        "drtg",
    ]);
    assert!(o.status.success());
    assert_eq!(total(&o), 30);
    // relations 2, 5, 8, 11 carry the pairs at the same position
    let s = stdout(&o);
    assert!(s.contains("relation  2: 0"));
    assert!(s.contains("relation  5: 3"));

    let o = darer(&["inspect-graph", "--data", p(&data), "--dialog", "missing"]);
    assert_eq!(o.status.code(), Some(2));
    let o = darer(&[
        "inspect-graph",
        "--data",
        p(&data),
        "--dialog",
        "three",
        "--which",
        "tree",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
