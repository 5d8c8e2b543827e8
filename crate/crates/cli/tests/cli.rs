use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rhl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rhl")).args(args).output().expect("spawn rhl")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn only_file(dir: &Path, prefix: &str) -> std::path::PathBuf {
    let mut hits: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(hits.len(), 1, "{prefix} in {dir:?}");
    hits.pop().unwrap()
}

#[test]
fn gen_run_analyze_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("noop.json");
    let out = dir.path().join("out");
    let g = rhl(&["gen", "noop", "--tasks", "64", "--cores", "8", "-o", p(&spec)]);
    assert!(g.status.success());

    let r = rhl(&["--backend", "local", "--out-dir", p(&out), "run", p(&spec)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let report = stdout_json(&r);
    assert_eq!(report["summary"]["tasks_done"], 64);
    assert!(report["run_id"].as_str().unwrap().starts_with("noop"));

    let events = only_file(&out, "events_");
    only_file(&out, "report_");
    only_file(&out, "hw_");

    let a = rhl(&["analyze", p(&events), "--spec", p(&spec)]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout_json(&a)["tasks_done"], 64);

    let t = rhl(&["analyze", p(&events), "--metric", "throughput"]);
    assert!(stdout_json(&t)["tasks_per_s"].as_f64().unwrap() > 0.0);

    let hw = rhl(&["analyze", p(&events), "--metric", "hw"]);
    assert!(String::from_utf8_lossy(&hw.stdout).starts_with("ts,value\n"));

    let rp = rhl(&["replay", p(&events)]);
    assert_eq!(rp.status.code(), Some(0));
    assert_eq!(stdout_json(&rp)["tasks"], 64);
}

#[test]
fn same_seed_gives_identical_sim_logs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("het.json");
    assert!(rhl(&["gen", "hetero", "--nodes", "4", "-o", p(&spec)]).status.success());
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = rhl(&["--seed", "5", "--out-dir", p(&out), "run", p(&spec)]);
        assert_eq!(r.status.code(), Some(0));
        logs.push(std::fs::read(only_file(&out, "events_")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn unknown_field_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"resources": {"nodes": [{"name": "n", "cores": 1}]}, "taks": []}"#).unwrap();
    let r = rhl(&["run", p(&spec)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("taks"));
}

#[test]
fn oversized_task_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("big.json");
    std::fs::write(
        &spec,
        r#"{"resources": {"nodes": [{"name": "n", "cores": 2}]},
            "tasks": [{"id": "t", "payload": {"category": "Function", "name": "noop"}, "ranks": 4}]}"#,
    )
    .unwrap();
    assert_eq!(rhl(&["run", p(&spec)]).status.code(), Some(1));
}

#[test]
fn failing_task_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("fail.json");
    std::fs::write(
        &spec,
        r#"{"resources": {"nodes": [{"name": "n", "cores": 2}]},
            "tasks": [{"id": "bad", "payload": {"category": "Executable", "command": "false", "args": []}},
                      {"id": "after", "payload": {"category": "Function", "name": "noop"}, "dependencies": ["bad"]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let r = rhl(&["--backend", "local", "--out-dir", p(&out), "run", p(&spec)]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    let report = stdout_json(&r);
    assert_eq!(report["tasks"]["Failed"], 1);
    assert_eq!(report["tasks"]["Canceled"], 1);
}

#[test]
fn missing_log_and_malformed_log() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rhl(&["replay", p(&dir.path().join("absent.jsonl"))]).status.code(), Some(2));
    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "{\"ts\": 0}\n").unwrap();
    assert_eq!(rhl(&["analyze", p(&junk)]).status.code(), Some(1));
}

#[test]
fn gen_writes_to_stdout_without_output_flag() {
    let g = rhl(&["gen", "agentic", "--agents", "3", "--duration", "2"]);
    assert!(g.status.success());
    let spec = stdout_json(&g);
    assert_eq!(spec["agents"]["agents"], 3);
}
