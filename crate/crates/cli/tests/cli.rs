use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kvprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvprune")).args(args).output().unwrap()
}

fn small(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "--text-tokens", "16", "--visual-tokens", "16", "--layers", "2", "--heads", "2", "--head-dim", "8",
        "--steps", "6", "--obs-rows", "8", "--obs", "8", "--recent", "4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(small(extra));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    kvprune(&refs)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_step_rows_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let o = run(
        "simulate",
        &["--policy", "csp", "--budget", "0.3", "--ratio", "0.5", "--n", "1", "--seed", "7", "--out", path(&out)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("policy,step,layer,triggered"));
    assert_eq!(lines.len(), 1 + 6 * 2);

    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim.config.json")).unwrap()).unwrap();
    assert_eq!(sidecar["prune"]["cross_ratio"], 0.5);
    assert_eq!(sidecar["prune"]["recent"], 4);
    assert_eq!(sidecar["prune"]["budget"], 12);
    assert_eq!(sidecar["input"]["synth"]["seed"], 7);
    assert!(sidecar["prune"].get("widen_to_budget").is_some());
}

#[test]
fn identical_runs_give_identical_bytes() {
    let a = run("simulate", &["--seed", "3"]);
    let b = run("simulate", &["--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = run("simulate", &["--seed", "4"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn compare_emits_one_block_per_policy() {
    let dir = tempfile::tempdir().unwrap();
    let summary = dir.path().join("summary.csv");
    let o = run("compare", &["--policies", "csp,global-topk,accum,full", "--summary", path(&summary)]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut blocks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    blocks.dedup();
    assert_eq!(blocks, ["csp", "snapkv-like", "h2o-like", "full"]);
    let rows = fs::read_to_string(summary).unwrap();
    assert_eq!(rows.lines().count(), 5);
    assert!(rows.lines().all(|l| l.split(',').nth(4) == Some("7") || l.starts_with("policy")));
}

#[test]
fn compare_needs_two_policies() {
    assert_eq!(run("compare", &["--policies", "csp"]).status.code(), Some(1));
}

#[test]
fn sweep_rows_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let plot = dir.path().join("ratio.svg");
    let o = run("sweep", &["--axis", "ratio", "--grid", "0,0.5,1", "--policies", "csp,global-topk", "--plot", path(&plot)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(fs::read_to_string(plot).unwrap().starts_with("<svg"));
}

#[test]
fn gen_trace_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.trace");
    let o = kvprune(&[
        "gen-trace", "--out", path(&trace), "--text-tokens", "16", "--visual-tokens", "16", "--layers", "2",
        "--heads", "2", "--head-dim", "8", "--steps", "6", "--obs-rows", "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(&trace).unwrap()[..4], b"CSPT");
    assert!(dir.path().join("t.config.json").exists());

    let out = dir.path().join("an");
    let o = kvprune(&["analyze", path(&trace), "--out-dir", path(&out), "--recent", "4", "--obs", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let div = fs::read_to_string(out.join("divergence.csv")).unwrap();
    assert_eq!(div.lines().count(), 3);
    for f in ["density.csv", "js.svg", "kde_layer0.svg", "kde_layer1.svg", "analyze.config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let o = kvprune(&["simulate", "--trace", path(&trace), "--recent", "4", "--obs", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"prune": {"cross_ratio": 0.25, "recent": 4}, "budget_fraction": 0.5}"#).unwrap();
    let out = dir.path().join("o.csv");
    let o = run("simulate", &["--config", path(&cfg), "--ratio", "0.75", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o.config.json")).unwrap()).unwrap();
    assert_eq!(sidecar["prune"]["cross_ratio"], 0.75);
    assert_eq!(sidecar["budget_fraction"], 0.5);
}

#[test]
fn exit_codes() {
    assert_eq!(kvprune(&["analyze", "missing.trace"]).status.code(), Some(2));
    assert_eq!(kvprune(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(kvprune(&["simulate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run("simulate", &["--policy", "lru"]).status.code(), Some(1));
    assert_eq!(run("simulate", &["--ratio", "1.5"]).status.code(), Some(1));
    assert_eq!(kvprune(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.trace");
    fs::write(&bad, b"NOPE0000000000000000").unwrap();
    assert_eq!(kvprune(&["analyze", path(&bad)]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(run("simulate", &["--config", path(&cfg)]).status.code(), Some(2));
}
