use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_axialseg");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--steps", "1", "--seed", "1", "--variant", "gated", "--out", "x.json"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--out", "d", "--count", "2", "--size", "16"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--variant", "nope"]).status.code(), Some(2));
}

#[test]
fn unknown_bench_variant_lists_valid_names() {
    let o = run(&["bench", "--variants", "bogus", "--out", "b.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("full2d") && err.contains("axial"), "{err}");
}

#[test]
fn gen_data_writes_pairs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["gen-data", "--out", s(d), "--count", "3", "--size", "16", "--seed", "7"]);
        assert!(o.status.success());
    }
    let mut names: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    assert!(names.contains(&"manifest.json".to_string()));
    for n in names.iter().filter(|n| n.ends_with(".pgm")) {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    let m = manifest(&a.join("manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["details"]["synth"]["size"], 16);
}

#[test]
fn gen_data_rejects_small_size_and_records_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["gen-data", "--out", s(&out), "--count", "2", "--size", "8", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("16"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ck = dir.path().join("m.json");
    assert!(run(&["gen-data", "--out", s(&data), "--count", "4", "--size", "16", "--seed", "3"]).status.success());
    let o = run(&[
        "train", "--data", s(&data), "--steps", "12", "--seed", "3", "--variant", "gated", "--out", s(&ck), "--d-model", "8", "--blocks", "1",
        "--batch", "2", "--val-fraction", "0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for suffix in ["train.csv", "val.csv", "manifest.json"] {
        assert!(dir.path().join(format!("m.json.{suffix}")).exists(), "{suffix}");
    }
    let log = std::fs::read_to_string(dir.path().join("m.json.train.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);
    let m = manifest(&dir.path().join("m.json.manifest.json"));
    assert_eq!(m["status"], "ok");
    assert!(m["details"]["final_loss"].as_f64().unwrap() < m["details"]["initial_loss"].as_f64().unwrap());

    let o = run(&["eval", "--data", s(&data), "--ckpt", s(&ck)]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "iou,precision,recall,f1,dice");
    assert_eq!(lines[1].split(',').count(), 5);

    let o = run(&["eval", "--data", s(&data), "--ckpt", s(&ck), "--threshold", "1.1"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    let text = std::fs::read_to_string(&ck).unwrap();
    std::fs::write(&bad, &text[..text.len() / 3]).unwrap();
    let o = run(&["eval", "--data", s(&data), "--ckpt", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed"));

    let other = dir.path().join("d32");
    assert!(run(&["gen-data", "--out", s(&other), "--count", "1", "--size", "32", "--seed", "3"]).status.success());
    assert_eq!(run(&["eval", "--data", s(&other), "--ckpt", s(&ck)]).status.code(), Some(1));
}

#[test]
fn train_on_missing_data_fails_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.json");
    let o = run(&["train", "--data", s(&dir.path().join("nope")), "--steps", "1", "--seed", "1", "--variant", "axial", "--out", s(&ck)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(manifest(&dir.path().join("m.json.manifest.json"))["status"], "failed");
}

#[test]
fn gradcheck_reports_and_passes() {
    let o = run(&["gradcheck", "--variant", "gated"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("max_rel_error=") && out.contains("worst="));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = run(&["bench", "--sizes", "8,16", "--trials", "1", "--out", s(&csv)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,H,W,d_model,heads,flops,wall_ns_median");
    assert_eq!(lines.len(), 5);
    assert!(dir.path().join("b.csv.manifest.json").exists());
}
