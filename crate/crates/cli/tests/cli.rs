use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn aaams(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aaams")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = aaams(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name).to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    ok(&["synth", "--seed", seed, "-n", "300", "--out-dir", s(&out)]);
    out
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "5");
    let b = dir.path().join("again");
    ok(&["synth", "--seed", "5", "-n", "300", "--out-dir", s(&b)]);
    for f in ["points.csv", "truth.csv", "mixture.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(a.join("points.csv")).unwrap().lines().count(), 300);
}

#[test]
fn synth_from_degenerate_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let desc = dir.path().join("m.json");
    std::fs::write(&desc, r#"{"components":[{"mean":[1.5,-2.0],"covariance":[0,0,0,0],"weight":1}]}"#).unwrap();
    let out = dir.path().join("o");
    ok(&["synth", "--mixture", s(&desc), "-n", "4", "--out-dir", s(&out)]);
    let text = std::fs::read_to_string(out.join("points.csv")).unwrap();
    assert_eq!(text, "1.5,-2\n".repeat(4));
}

#[test]
fn cluster_points_writes_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path(), "2");
    let out = dir.path().join("out");
    let pts = syn.join("points.csv");
    let truth = syn.join("truth.csv");
    ok(&["cluster", "--input", s(&pts), "--sigma-base", "0.09", "--epsilon", "0.09", "--truth", s(&truth), "--out-dir", s(&out)]);

    let clusters = json(out.join("clusters.json"));
    let clusters = clusters.as_array().unwrap();
    let total: u64 = clusters.iter().map(|c| c["size"].as_u64().unwrap()).sum();
    assert_eq!(total, 300);
    for c in clusters {
        assert_eq!(c["mode"].as_array().unwrap().len(), 2);
        assert_eq!(c["sigma"].as_array().unwrap().len(), 2);
    }
    let metrics = json(out.join("metrics.json"));
    for key in ["pri", "gce", "voi", "ari", "cluster_count"] {
        assert!(metrics[key].is_number(), "{key}");
    }
    assert!(metrics.get("bde").is_none());
    let summary = json(out.join("summary.json"));
    assert_eq!(summary["cluster_count"].as_u64().unwrap() as usize, clusters.len());

    let labels = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 301);
    let ellipses = std::fs::read_to_string(out.join("ellipses.csv")).unwrap();
    assert_eq!(ellipses.lines().count(), 1 + 2 * clusters.len());
    let row: Vec<&str> = ellipses.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert!(row[4].parse::<f64>().unwrap() > 0.0);

    let diag = std::fs::read_to_string(out.join("diagnostics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 1);
}

#[test]
fn cluster_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path(), "9");
    let pts = syn.join("points.csv");
    let mut dumps = Vec::new();
    for (run, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{run}"));
        let o = Command::new(env!("CARGO_BIN_EXE_aaams"))
            .env("AAAMS_THREADS", threads)
            .args(["cluster", "--input", s(&pts), "--sigma-base", "0.09", "--perturb", "--seed", "4", "--out-dir", s(&out)])
            .output()
            .unwrap();
        assert!(o.status.success());
        dumps.push(["labels.csv", "clusters.json", "ellipses.csv"].map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    assert!(dumps[0] == dumps[1]);
}

#[test]
fn image_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seg");
    ok(&[
        "cluster", "--image", &data("scene2.ppm"), "--params", "15,16,1,81", "--db", "1", "--min-size", "10",
        "--truth", &data("scene2_truth.pgm"), "--out-dir", s(&out),
    ]);
    for f in ["labels.png", "segments.png", "clusters.json", "ellipses.csv", "diagnostics.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = json(out.join("metrics.json"));
    assert!(metrics["bde"].is_number());
    assert!(metrics["pri"].as_f64().unwrap() > 0.9);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path(), "2");
    let pts = syn.join("points.csv");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "sigma-base = [0.09]\nmin-size = 1000\n").unwrap();
    let a = dir.path().join("a");
    ok(&["cluster", "--input", s(&pts), "--config", s(&cfg), "--out-dir", s(&a)]);
    assert_eq!(json(a.join("summary.json"))["cluster_count"], 1);
    let b = dir.path().join("b");
    ok(&["cluster", "--input", s(&pts), "--config", s(&cfg), "--min-size", "10", "--out-dir", s(&b)]);
    assert!(json(b.join("summary.json"))["cluster_count"].as_u64().unwrap() > 1);

    std::fs::write(&cfg, "sigma_base = [0.09]\n").unwrap();
    assert_eq!(aaams(&["cluster", "--input", s(&pts), "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn baselines_run() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path(), "2");
    let pts = syn.join("points.csv");
    for algo in ["ms", "vms"] {
        let out = dir.path().join(algo);
        ok(&["cluster", "--input", s(&pts), "--algo", algo, "--sigma-base", "0.09", "--out-dir", s(&out)]);
        let summary = json(out.join("summary.json"));
        assert_eq!(summary["algo"], algo);
        assert!(!out.join("diagnostics.jsonl").exists());
    }
    let raw = dir.path().join("raw");
    ok(&["cluster", "--input", s(&pts), "--algo", "vms", "--out-dir", s(&raw)]);
    assert_eq!(json(raw.join("summary.json"))["postprocessed"], false);
}

#[test]
fn sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path(), "2");
    let pts = syn.join("points.csv");
    let out = dir.path().join("sw");
    ok(&["sweep", "--input", s(&pts), "--sigma-base", "0.09", "--param", "epsilon", "--values", "0.04", "--out-dir", s(&out)]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("cluster_count") && lines[0].contains("mean_cluster_size"));
    assert!(lines[1].starts_with("epsilon,0,0.04,"));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(aaams(&["cluster", "--input", s(&missing), "--sigma-base", "1"]).status.code(), Some(2));
    let syn = synth(dir.path(), "2");
    let pts = syn.join("points.csv");
    assert_eq!(aaams(&["cluster", "--input", s(&pts)]).status.code(), Some(2));
    assert_eq!(aaams(&["cluster", "--input", s(&pts), "--sigma-base", "1,2"]).status.code(), Some(2));
    assert_eq!(
        aaams(&["sweep", "--input", s(&pts), "--sigma-base", "1", "--param", "epsilon", "--values"]).status.code(),
        Some(2)
    );
    let o = Command::new(env!("CARGO_BIN_EXE_aaams"))
        .env("AAAMS_THREADS", "0")
        .args(["cluster", "--input", s(&pts), "--sigma-base", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
