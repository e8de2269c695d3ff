use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

/// Render cache shared by every invocation in this test binary.
fn cache_dir() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

fn a2r2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2r2"))
        .args(args)
        .env("A2R2_CACHE_DIR", cache_dir())
        .env_remove("A2R2_BACKEND_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = a2r2(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("ds");
    ok(&["synth", "--n", &n.to_string(), "--out", s(&out), "--seed", &seed.to_string()]);
    out.join("dataset.jsonl")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn batch_writes_rows_summaries_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 20, 1);
    let out = dir.path().join("out");
    let table = ok(&["batch", "--dataset", s(&ds), "--out", s(&out), "-o", "backend.endpoint=mock:?seed=2&errors=1"]);
    assert!(table.starts_with("strategy"));
    assert!(table.lines().nth(1).unwrap().starts_with("a2r2"));

    let csv = read(&out.join("metrics.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 22);
    assert!(lines[21].starts_with("mean,"));
    assert_eq!(read(&out.join("summary.jsonl")).lines().count(), 20);
    assert!(read(&out.join("config.toml")).contains("mock:?seed=2&errors=1"));
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 20);
}

#[test]
fn repeated_batches_write_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 6, 2);
    let endpoint = "backend.endpoint=mock:?seed=5&errors=3&fix_per_round=1&halluc_rate=0.3";
    let mut summaries = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&["batch", "--dataset", s(&ds), "--out", s(&out), "-o", endpoint, "-o", "run.parallel_workers=3"]);
        summaries.push(std::fs::read(out.join("summary.jsonl")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn best_of_n_makes_n_generation_calls() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 2, 3);
    let out = dir.path().join("out");
    ok(&[
        "batch",
        "--dataset",
        s(&ds),
        "--out",
        s(&out),
        "-o",
        "backend.endpoint=mock:?errors=2",
        "-o",
        "run.strategy=best_of_n",
        "-o",
        "run.n_samples=8",
    ]);
    for entry in std::fs::read_dir(out.join("runs")).unwrap() {
        let transcript = read(&entry.unwrap().path().join("transcript.jsonl"));
        let generations = transcript
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["role"] == "generation")
            .count();
        assert_eq!(generations, 8);
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(a2r2(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[run]\nt_max = \"many\"\n").unwrap();
    let out = a2r2(&["-c", s(&bad), "report", "--run-dir", "."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(a2r2(&["-o", "run.unknown=1", "report", "--run-dir", "."]).status.code(), Some(2));
}

#[test]
fn missing_backend_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 1, 4);
    let out = a2r2(&["batch", "--dataset", s(&ds), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backend.endpoint"));
}

#[test]
fn sweep_residuals_and_matching_single_limit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 3, 5);
    let endpoint = "backend.endpoint=mock:?seed=1&errors=4&fix_per_round=1";
    let out = dir.path().join("sweep");
    let table = ok(&["sweep", "--dataset", s(&ds), "--rounds", "1,2,3,4", "--out", s(&out), "-o", endpoint]);
    assert!(table.starts_with("round_limit"));

    let mut reader = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let residuals: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(residuals, vec![3.0, 2.0, 1.0, 0.0]);

    let single = dir.path().join("single");
    ok(&["batch", "--dataset", s(&ds), "--out", s(&single), "-o", endpoint, "-o", "run.t_max=2"]);
    assert_eq!(read(&single.join("summary.jsonl")), read(&out.join("t_max_2/summary.jsonl")));
}

#[test]
fn ablate_writes_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 3, 6);
    let out = dir.path().join("abl");
    let table = ok(&["ablate", "--dataset", s(&ds), "--out", s(&out), "-o", "backend.endpoint=mock:?seed=1&errors=2"]);
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(labels, vec!["full", "ablated"]);
    assert_eq!(read(&out.join("ablation.csv")).lines().count(), 3);
    assert!(out.join("full/summary.jsonl").is_file());
    assert!(out.join("ablated/summary.jsonl").is_file());
}

#[test]
fn report_and_audit_read_saved_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 3, 7);
    let out = dir.path().join("out");
    ok(&[
        "batch",
        "--dataset",
        s(&ds),
        "--out",
        s(&out),
        "-o",
        "backend.endpoint=mock:?seed=3&errors=10&fix_per_round=1&max_items=3&fabricate=1",
        "-o",
        "run.overlays=true",
        "-o",
        "run.t_max=3",
    ]);

    let report = ok(&["report", "--run-dir", s(&out)]);
    assert!(report.contains("round 0:"));
    assert!(report.contains("overlay:"));
    assert!(report.trim_end().ends_with(&format!("3 run(s) in {}", out.display())));

    let csv_path = dir.path().join("audit.csv");
    let audit = ok(&["audit", "--run-dir", s(&out), "--rounds", "3", "--out", s(&csv_path)]);
    let rows: Vec<Vec<&str>> = audit.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert_eq!(row[4], "25.0");
    }
    assert_eq!(read(&csv_path).lines().count(), 4);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = a2r2(&["report", "--run-dir", s(&empty)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs found"));
}

#[test]
fn metrics_scores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 3, 8);
    let records: Vec<serde_json::Value> = read(&ds).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let preds: Vec<String> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let latex = if i == 0 { "x".to_string() } else { r["latex"].as_str().unwrap().to_string() };
            serde_json::json!({"id": r["id"], "latex": latex}).to_string()
        })
        .collect();
    let pred_path = dir.path().join("pred.jsonl");
    std::fs::write(&pred_path, preds.join("\n") + "\n").unwrap();

    let csv = ok(&["metrics", "--pred", s(&pred_path), "--dataset", s(&ds)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    let bleu = |line: &str| line.split(',').nth(5).unwrap().parse::<f64>().unwrap();
    assert!(bleu(lines[1]) < 100.0);
    assert_eq!(bleu(lines[2]), 100.0);
    assert_eq!(bleu(lines[3]), 100.0);
}

#[test]
fn curate_writes_subset_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let models = ["qwen2.5-vl-7b", "qwen2.5-vl-32b", "llama-3.2-11b-vision"];
    let lines: Vec<String> = (0..10)
        .map(|i| {
            let q = i as f64 / 10.0;
            let scores: serde_json::Map<String, serde_json::Value> = models
                .iter()
                .map(|m| {
                    let v = serde_json::json!({"rouge_m": q, "bleu": q, "edit_raw": 10.0 - i as f64, "judge": i as f64});
                    (m.to_string(), v)
                })
                .collect();
            serde_json::json!({"instance_id": format!("i{i}"), "models": scores}).to_string()
        })
        .collect();
    let scores = dir.path().join("scores.jsonl");
    std::fs::write(&scores, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("cur");
    let run = a2r2(&["curate", "--scores", s(&scores), "--k", "3", "--out", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(read(&out.join("subset.txt")), "i0\ni1\ni2\n");
    let prov: serde_json::Value = serde_json::from_str(&read(&out.join("provenance.json"))).unwrap();
    assert_eq!(prov["k"], 3);
    assert_eq!(prov["scored"], 10);

    let desc = dir.path().join("desc");
    ok(&["curate", "--scores", s(&scores), "--k", "2", "--direction", "desc", "--out", s(&desc)]);
    assert_eq!(read(&desc.join("subset.txt")), "i9\ni8\n");
}
