//! End-to-end runs of the `parttex` binary on a tiny synthetic setup.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# tiny model for fast command tests
seed = 4
epochs = 2
batch_size = 4
learning_rate = 1e-3
input_height = 32
input_width = 32
channels = 4,6,6
steps = 3
hidden = 8
region_height = 3
region_width = 3
codewords = 4
classes = 4
k = 5
";

fn parttex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parttex"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = parttex(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-data", "--count", "12", "--seed", "7", "--out", s(d)]);
    }
    let (x, y) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(x.len(), 13);
    assert_eq!(x, y);
}

#[test]
fn full_pipeline_runs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, "");
    let cfg = s(&cfg);
    ok(&["synth-data", "--config", cfg, "--count", "16", "--seed", "1", "--out", s(&t.join("train"))]);
    ok(&["synth-data", "--config", cfg, "--count", "8", "--seed", "2", "--out", s(&t.join("test"))]);
    let train_m = t.join("train/manifest.jsonl");
    let test_m = t.join("test/manifest.jsonl");
    let run = t.join("run");
    let summary = ok(&["train", "--config", cfg, "--manifest", s(&train_m), "--out", s(&run)]);
    assert!(summary.contains("trained 2 epochs"));
    let ckpt = run.join("final.ptxc");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 8);

    let eval = t.join("eval.jsonl");
    ok(&["eval-classify", "--config", cfg, "--manifest", s(&test_m), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    let e = &json_lines(&eval)[0];
    for key in ["ap_all", "map", "top6_precision", "top6_recall", "exact_set_match"] {
        assert!(e[key].as_f64().is_some(), "missing {key}");
    }
    assert_eq!(e["top6_flagged"], true);
    assert!(e["localization"]["ratio"].as_f64().is_some());

    let (gal, qry) = (t.join("gallery.ptxf"), t.join("query.ptxf"));
    ok(&["extract", "--config", cfg, "--manifest", s(&train_m), "--checkpoint", s(&ckpt), "--out", s(&gal)]);
    ok(&["extract", "--config", cfg, "--manifest", s(&test_m), "--checkpoint", s(&ckpt), "--out", s(&qry)]);

    let idx = t.join("index.jsonl");
    ok(&["index", "--features", s(&gal), "--manifest", s(&train_m), "--out", s(&idx)]);
    assert_eq!(json_lines(&idx)[0]["images"], 16);

    let ret = t.join("retrieve.jsonl");
    ok(&["retrieve", "--config", cfg, "--gallery", s(&gal), "--query", s(&gal), "--k", "3", "--allow-self", "--out", s(&ret)]);
    for line in json_lines(&ret) {
        let hits = line["hits"].as_array().unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0]["image_id"], line["query_id"]);
        assert_eq!(hits[0]["distance"], 0.0);
    }
    let parts = t.join("parts.jsonl");
    ok(&["retrieve", "--config", cfg, "--gallery", s(&gal), "--query", s(&qry), "--mode", "parts", "--out", s(&parts)]);
    assert_eq!(json_lines(&parts).len(), 8);

    let rec = t.join("recommend.jsonl");
    let out = ok(&[
        "recommend", "--config", cfg, "--gallery", s(&gal), "--query", s(&qry), "--manifest", s(&train_m),
        "--query-manifest", s(&test_m), "--tau", "0.5", "--out", s(&rec),
    ]);
    assert!(out.contains("recommendation precision"));
    let lines = json_lines(&rec);
    assert_eq!(lines.len(), 9);
    for l in &lines[..8] {
        let groups = l["groups"].as_array().unwrap();
        assert!(!groups.is_empty());
        let scores: Vec<f64> = groups.iter().map(|g| g["part_score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    let er = t.join("eval_retrieval.jsonl");
    let out = ok(&[
        "eval-retrieval", "--config", cfg, "--gallery", s(&gal), "--query", s(&qry), "--manifest", s(&train_m),
        "--query-manifest", s(&test_m), "--k", "20", "--out", s(&er),
    ]);
    assert!(out.contains("top-20 accuracy"));
    let lines = json_lines(&er);
    let ks: Vec<u64> = lines.iter().filter_map(|l| l["k"].as_u64()).collect();
    assert_eq!(ks, (1..=50).collect::<Vec<u64>>());
    let acc: Vec<f64> = lines.iter().filter_map(|l| l["accuracy"].as_f64()).collect();
    assert!(acc.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, "epochs = 1\n");
    let data = t.join("data");
    ok(&["synth-data", "--config", s(&cfg), "--count", "8", "--out", s(&data)]);
    let m = data.join("manifest.jsonl");
    for name in ["a", "b"] {
        ok(&["train", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&t.join(name))]);
    }
    let a = fs::read(t.join("a/final.ptxc")).unwrap();
    let b = fs::read(t.join("b/final.ptxc")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(t.join("a/train_log.jsonl")).unwrap(), fs::read(t.join("b/train_log.jsonl")).unwrap());
}

#[test]
fn gradcheck_reports_every_operator() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("grad.jsonl");
    ok(&["gradcheck", "--out", s(&report)]);
    let lines = json_lines(&report);
    assert!(lines.len() >= 20);
    for l in lines {
        assert_eq!(l["pass"], true, "{l}");
        assert!(l["max_relative_error"].as_f64().unwrap() < 1e-4);
    }
}

fn error_of(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("structured error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn validation_failures_exit_with_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "epochs = 3\nmomentum = 0.9\n").unwrap();
    let out = parttex(&["gradcheck", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_of(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("momentum"));

    let out = parttex(&["train", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_of(&out)["message"].as_str().unwrap().contains("--manifest"));

    let missing = tmp.path().join("nope.ptxf");
    let out = parttex(&["index", "--features", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"], "io");
}

#[test]
fn non_finite_loss_exits_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, "epochs = 3\nlearning_rate = 1e30\n");
    let data = t.join("data");
    ok(&["synth-data", "--config", s(&cfg), "--count", "8", "--out", s(&data)]);
    let out = parttex(&["train", "--config", s(&cfg), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&t.join("run"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_of(&out)["error"], "non_finite_loss");
    assert!(t.join("run/last_good.ptxc").exists());
}
