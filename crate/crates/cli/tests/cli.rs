use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lookahead::report::parse_csv;
use lookahead::trace::{Pipeline, QueryTrace, Stage, TraceSet};
use lookahead::{EmbeddingMatrix, IvfIndex};

fn lookahead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lookahead"))
        .current_dir(dir)
        .env_remove("LOOKAHEAD_SEED")
        .env_remove("LOOKAHEAD_FORMAT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lookahead(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(dir: &Path, args: &[&str]) -> String {
    let out = lookahead(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// Vectors, a 16-cluster index and HyDE traces in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-vectors", "--n", "1000", "--dim", "8", "--out", "v.laiv"]);
    ok(d, &["build-index", "--vectors", "v.laiv", "--clusters", "16", "--out", "ix.laix"]);
    ok(d, &["synth-traces", "--vectors", "v.laiv", "--n", "48", "--out", "t.jsonl"]);
    dir
}

#[test]
fn built_index_round_trips() {
    let dir = workspace();
    let bytes = std::fs::read(dir.path().join("ix.laix")).unwrap();
    let ix = IvfIndex::read_from(&bytes[..]).unwrap();
    assert_eq!(ix.num_clusters(), 16);
    assert_eq!(ix.num_vectors(), 1000);
    let mut again = Vec::new();
    ix.write_to(&mut again).unwrap();
    assert_eq!(again, bytes);

    ok(dir.path(), &["build-index", "--vectors", "v.laiv", "--clusters", "16", "--out", "ix2.laix"]);
    assert_eq!(std::fs::read(dir.path().join("ix2.laix")).unwrap(), bytes);
    ok(dir.path(), &["--seed", "9", "build-index", "--vectors", "v.laiv", "--clusters", "16", "--out", "ix3.laix"]);
    assert_ne!(std::fs::read(dir.path().join("ix3.laix")).unwrap(), bytes);
}

#[test]
fn inconsistent_vector_header_reports_an_offset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let db = EmbeddingMatrix::from_rows(4, &[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
    let mut bytes = Vec::new();
    db.write_laiv(&mut bytes).unwrap();
    // Claim three components per row instead of four.
    bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
    std::fs::write(d.join("bad.laiv"), &bytes).unwrap();
    let err = stderr_of(d, &["build-index", "--vectors", "bad.laiv", "--clusters", "1", "--out", "ix.laix"]);
    assert!(err.contains("byte offset"), "{err}");
    assert!(!d.join("ix.laix").exists());
}

fn write_timed_traces(dir: &Path, durations: &[f64]) {
    let traces = durations
        .iter()
        .enumerate()
        .map(|(i, &d)| QueryTrace {
            trace_id: i as u64,
            pipeline: Pipeline::HyDE,
            input_ref: 0,
            stages: vec![Stage::generate(d, Some(1), 1), Stage::retrieve(1, 1), Stage::generate(0.5, None, 1)],
        })
        .collect();
    let embeddings = EmbeddingMatrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    TraceSet { traces, embeddings }.save(&dir.join("c.jsonl"), &dir.join("c.laiv")).unwrap();
}

#[test]
fn calibrate_multiplies_mean_generation_time_by_bandwidth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_timed_traces(d, &[0.5, 1.5, 1.0]);
    let out = ok(
        d,
        &["calibrate", "--traces", "c.jsonl", "--bandwidth", "1000000", "--capacity", "4000000", "--out", "c.toml"],
    );
    assert_eq!(out.trim(), "prefetch_budget_bytes = 1000000");
    let cfg = lookahead::RunConfig::from_toml(&std::fs::read_to_string(d.join("c.toml")).unwrap()).unwrap();
    assert_eq!(cfg.prefetch_budget_bytes, 1_000_000);
    assert_eq!(cfg.bandwidth_bytes_per_s, 1e6);

    // The default fast tier is smaller than the calibrated budget.
    let out = lookahead(d, &["calibrate", "--traces", "c.jsonl", "--bandwidth", "1000000", "--out", "d.toml"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clamped to 262144"));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "prefetch_budget_bytes = 262144");
}

#[test]
fn calibrate_without_traces_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_timed_traces(d, &[]);
    let err = stderr_of(d, &["calibrate", "--traces", "c.jsonl", "--bandwidth", "1000", "--out", "c.toml"]);
    assert!(err.contains("no traces"), "{err}");
    write_timed_traces(d, &[1.0]);
    let err =
        stderr_of(d, &["calibrate", "--traces", "c.jsonl", "--pipeline", "FLARE", "--bandwidth", "1000", "--out", "c.toml"]);
    assert!(err.contains("no traces"), "{err}");
}

#[test]
fn baseline_runs_are_reproducible() {
    let dir = workspace();
    let d = dir.path();
    let args = |out: &'static str| {
        ["run", "--index", "ix.laix", "--traces", "t.jsonl", "--lookahead", "off", "--out", out]
    };
    let a = ok(d, &args("a.jsonl"));
    let b = ok(d, &args("b.jsonl"));
    assert_eq!(a, b);
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());
    let report = ok(d, &["report", "a.jsonl", "b.jsonl"]);
    assert!(report.lines().any(|l| l.trim_start().starts_with("mean")), "{report}");
}

#[test]
fn bench_throughput_grows_with_workers() {
    let dir = workspace();
    let csv = ok(dir.path(), &["--format", "csv", "bench", "--index", "ix.laix", "--traces", "t.jsonl", "--workers", "1,2,4"]);
    let rows = parse_csv(&csv).unwrap();
    let runs: Vec<_> = rows.iter().filter(|r| r.label != "mean").collect();
    assert_eq!(runs.len(), 3);
    assert_eq!(runs.iter().map(|r| r.workers).collect::<Vec<_>>(), vec![Some(1), Some(2), Some(4)]);
    assert!(runs.windows(2).all(|w| w[1].throughput_qps > w[0].throughput_qps), "{csv}");
}

#[test]
fn report_without_records_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let err = stderr_of(d, &["report", "empty.jsonl"]);
    assert!(err.contains("no data"), "{err}");
    let err = stderr_of(d, &["report", "missing.jsonl"]);
    assert!(err.contains("missing.jsonl"), "{err}");
}

#[test]
fn mismatched_inputs_are_rejected() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["gen-vectors", "--n", "100", "--dim", "4", "--out", "small.laiv"]);
    ok(d, &["synth-traces", "--vectors", "small.laiv", "--n", "4", "--out", "s.jsonl"]);
    let err = stderr_of(d, &["run", "--index", "ix.laix", "--traces", "s.jsonl"]);
    assert!(err.contains("dimension"), "{err}");
    let sidecar: PathBuf = d.join("s.laiv");
    assert!(sidecar.exists());
}
