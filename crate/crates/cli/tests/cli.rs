//! End-to-end runs of the `hiercat` binary.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_hiercat");

fn run(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().expect("spawn hiercat");
    assert!(
        out.status.success(),
        "hiercat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const MODEL_FLAGS: &[&str] = &["--dim", "16", "--trigram-buckets", "5000", "--word-buckets", "2000"];

/// synth, mine, pretrain, train, calibrate; returns the checkpoint bytes.
fn pipeline(dir: &Path, seed: &str) -> Vec<u8> {
    let data = p(dir, "data");
    run(&["synth", "--out-dir", &data, "--roots", "4", "--branching", "2-3,0-2", "--n-queries", "300", "--seed", seed]);
    let data = dir.join("data");
    run(&["mine", "--taxonomy", &p(&data, "taxonomy.tsv"), "--log", &p(&data, "log.jsonl"), "--out", &p(dir, "pairs.tsv")]);
    let (tax, corpus) = (p(&data, "taxonomy.tsv"), p(&data, "pretrain.tsv"));
    let pre_out = p(dir, "pre.ckpt");
    let mut pre = vec!["pretrain", "--taxonomy", &tax, "--pairs", &corpus];
    pre.extend(["--out", &pre_out, "--epochs", "1", "--seed", seed]);
    pre.extend(MODEL_FLAGS);
    run(&pre);
    let loss = p(dir, "loss.csv");
    let model = p(dir, "model.ckpt");
    run(&[
        "train", "--taxonomy", &p(&data, "taxonomy.tsv"), "--pairs", &p(dir, "pairs.tsv"), "--init", &pre_out,
        "--out", &model, "--epochs", "3", "--loss-csv", &loss, "--seed", seed,
    ]);
    let csv = std::fs::read_to_string(&loss).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some("epoch,loss"));
    run(&[
        "calibrate", "--taxonomy", &p(&data, "taxonomy.tsv"), "--checkpoint", &model, "--queries",
        &p(&data, "calibration.tsv"), "--percentile", "20", "--out", &p(dir, "beam.json"),
    ]);
    std::fs::read(&model).unwrap()
}

#[test]
fn full_pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = pipeline(a.path(), "7");
    let cb = pipeline(b.path(), "7");
    assert_eq!(ca, cb);
    for f in ["data/taxonomy.tsv", "data/log.jsonl", "data/test.tsv", "data/pretrain.tsv", "pairs.tsv", "beam.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert_ne!(pipeline(c.path(), "8"), ca);
}

#[test]
fn eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, "3");
    let data = d.join("data");
    let tax = p(&data, "taxonomy.tsv");
    let model = p(d, "model.ckpt");
    let metrics = run(&[
        "eval", "--taxonomy", &tax, "--checkpoint", &model, "--labeled", &p(&data, "test.tsv"), "--beam",
        &p(d, "beam.json"), "--out", &p(d, "metrics.json"),
    ]);
    let v: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(v["queries"].as_u64().unwrap() > 0);
    let depth1 = &v["per_depth"][0];
    for k in ["micro_precision", "micro_recall", "micro_f1", "acc_at_1", "acc_at_5"] {
        let x = depth1[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{k} = {x}");
    }
    let flat = run(&["eval", "--taxonomy", &tax, "--checkpoint", &model, "--labeled", &p(&data, "test.tsv"), "--flat"]);
    assert!(serde_json::from_str::<serde_json::Value>(&flat).is_ok());

    let mut child = Command::new(BIN)
        .args(["infer", "--taxonomy", &tax, "--checkpoint", &model, "--width", "3"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let first_query = std::fs::read_to_string(data.join("test.tsv")).unwrap().lines().next().unwrap().split('\t').next().unwrap().to_string();
    write!(child.stdin.take().unwrap(), "{first_query}\n\n{first_query}\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["predictions"].as_array().unwrap().len(), 3);
    assert_eq!(lines[0]["cache_hit"], false);
    assert!(lines[1]["predictions"].as_array().unwrap().is_empty());
    assert_eq!(lines[2]["cache_hit"], true);
    assert_eq!(lines[0]["predictions"], lines[2]["predictions"]);
}

#[test]
fn serve_answers_and_stops_on_signal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["synth", "--out-dir", &p(d, "data"), "--roots", "3", "--branching", "2-2", "--n-queries", "50"]);
    let tax = p(&d.join("data"), "taxonomy.tsv");
    let pairs = p(d, "pairs.tsv");
    run(&["mine", "--taxonomy", &tax, "--log", &p(&d.join("data"), "log.jsonl"), "--out", &pairs, "--min-frequency", "1"]);
    let model = p(d, "m.ckpt");
    let mut train = vec!["train", "--taxonomy", &tax, "--pairs", &pairs, "--epochs", "1", "--out", &model];
    train.extend(MODEL_FLAGS);
    run(&train);
    let mut child = Command::new(BIN)
        .args(["serve", "--taxonomy", &tax, "--checkpoint", &model, "--addr", "127.0.0.1:0", "--width", "2"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited before listening");
        if let Some(a) = line.trim().strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    let stream = TcpStream::connect(&addr).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut ask = |req: &str| {
        writeln!(writer, "{req}").unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        serde_json::from_str::<serde_json::Value>(&line).unwrap()
    };
    assert_eq!(ask("{oops"), serde_json::json!({"error": "bad_request"}));
    let v = ask(r#"{"query": "anything at all", "top_k": 2}"#);
    assert_eq!(v["predictions"].as_array().unwrap().len(), 2);
    assert_eq!(ask(r#"{"query": "anything at all", "top_k": 0}"#)["predictions"], serde_json::json!([]));
    assert_eq!(ask(r#"{"query": "ANYTHING  at all", "top_k": 2}"#)["cache_hit"], true);

    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
}

#[test]
fn rejects_bad_flags() {
    let out = Command::new(BIN).args(["synth", "--out-dir", "/tmp/x", "--branching", "3-1"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(BIN).args(["train"]).output().unwrap();
    assert!(!out.status.success());
}
