//! End-to-end checks of the `chemau` binary outside the acceptance suite.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn chemau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chemau"))
        .args(args)
        .env_remove("CHEMAU_GENERAL_URL")
        .env_remove("CHEMAU_DOMAIN_URL")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_fixture(set: &str, out: &Path, extra: &[&str]) -> Output {
    let dataset = fixture(&format!("{set}.jsonl"));
    let script = fixture(&format!("{set}.script.json"));
    let mut args = vec![
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--mock-script",
        script.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    chemau(&args)
}

#[test]
fn synthetic_compare_writes_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp.json");
    let o = chemau(&[
        "compare",
        "--synthetic",
        "fig1",
        "--synthetic",
        "rising:0.5:1:4",
        "--alpha",
        "0.1",
        "--theta-sweep",
        "0.4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["schema"], "chemau-compare/1");
    assert_eq!(doc["steps"].as_array().unwrap().len(), 7);
    assert!(stdout(&o).contains("adaptive"));
}

#[test]
fn report_reproduces_run_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_fixture("ablation", dir.path(), &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report = chemau(&["report", "--in", dir.path().to_str().unwrap()]);
    assert!(report.status.success());
    assert_eq!(stdout(&report), stdout(&run));
    assert_eq!(stdout(&report), std::fs::read_to_string(dir.path().join("report.txt")).unwrap());

    let doc = chemau(&["report", "--in", dir.path().to_str().unwrap(), "--format", "doc"]);
    let v: serde_json::Value = serde_json::from_slice(&doc.stdout).unwrap();
    assert_eq!(v["accuracy"], "100.00");
}

#[test]
fn compare_over_run_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_fixture("formula-fix", dir.path(), &["--mode", "baseline"]).status.success());
    let traces = dir.path().join("traces");
    let o = chemau(&["compare", "--traces", traces.to_str().unwrap(), "--theta-sweep", "0:2:0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn mirrored_convention_defaults_keep_results() {
    let canon = tempfile::tempdir().unwrap();
    let mirrored = tempfile::tempdir().unwrap();
    let a = run_fixture("ablation", canon.path(), &[]);
    let b = run_fixture("ablation", mirrored.path(), &["--sign-convention", "mirrored"]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let dataset = fixture("ablation.jsonl");

    // no backend at all
    let o = chemau(&["run", "--dataset", dataset.to_str().unwrap(), "--out", out]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("general backend"));

    // domain-dependent mode without a domain url
    let o = chemau(&[
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--general-url",
        "http://127.0.0.1:9",
        "--out",
        out,
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("domain backend"));

    // canonical convention with a negative threshold
    let o = run_fixture("ablation", dir.path(), &["--theta", "-1"]);
    assert!(!o.status.success());

    assert!(!chemau(&["compare", "--synthetic", "nope"]).status.success());
    assert!(!chemau(&["compare", "--synthetic", "fig1", "--theta-sweep", "2:1:0.1"]).status.success());
    assert!(!chemau(&["report", "--in", dir.path().join("missing").to_str().unwrap()]).status.success());

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"x\",\"question\":\"q\",\"options\":{\"A\":\"a\"},\"answer\":\"Z\"}\n").unwrap();
    let o = chemau(&[
        "run",
        "--dataset",
        bad.to_str().unwrap(),
        "--mock-script",
        fixture("ablation.script.json").to_str().unwrap(),
        "--out",
        out,
    ]);
    assert!(!o.status.success());
}
