use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn tomgraph(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomgraph"))
        .arg("--config")
        .arg(fixtures().join("pipeline.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn prepare(out: &Path) {
    for cmd in ["ingest", "extract", "build-kg", "genqa", "verify"] {
        ok(&tomgraph(out, &[cmd]));
    }
}

#[test]
fn full_chain_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let eval = ok(&tomgraph(out, &["eval"]));
    assert!(eval.contains("48 prediction(s)"), "{eval}");
    let report = ok(&tomgraph(out, &["report", "--format", "markdown"]));
    assert!(report.contains("| w Triple | 100.00 | 100.00 | 100.00 | 100.00 | 100.00 |"), "{report}");
    let csv = out.join("scores.csv");
    ok(&tomgraph(out, &["report", "--format", "csv", "--file", csv.to_str().unwrap()]));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("model,context,triples,"));
    ok(&tomgraph(out, &["review-export"]));
    ok(&tomgraph(out, &["emit-ft", "--triples", "off", "--waive-verification"]));
    assert!(out.join("ft/train.no_triples.jsonl").exists());
    let stats = ok(&tomgraph(out, &["stats"]));
    assert!(stats.contains("King Lear"), "{stats}");
}

#[test]
fn triples_without_graph_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    std::fs::remove_dir_all(out.join("kg")).unwrap();
    let o = tomgraph(out, &["eval", "--triples", "on"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(tomgraph(out, &["eval", "--triples", "off"]).status.code(), Some(0));
}

#[test]
fn missing_replay_entry_is_a_backend_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    prepare(&out);
    let script: String = std::fs::read_to_string(fixtures().join("replay.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("p3 Desire without triples"))
        .map(|l| format!("{l}\n"))
        .collect();
    let replay = dir.path().join("partial.jsonl");
    std::fs::write(&replay, script).unwrap();
    let o = tomgraph(&out, &["--replay", replay.to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let preds = std::fs::read_to_string(out.join("eval/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 48);
    assert_eq!(preds.lines().filter(|l| l.contains("\"letter\":null")).count(), 4);
}

#[test]
fn configuration_problems_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(env!("CARGO_BIN_EXE_tomgraph"))
        .args(["--config", dir.path().join("absent.toml").to_str().unwrap(), "ingest"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nunknown_key = true\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tomgraph")).args(["--config", bad.to_str().unwrap(), "ingest"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let unset = dir.path().join("unset.toml");
    std::fs::write(&unset, "seed = 1\n[corpus]\npath = \"${TOMGRAPH_TEST_SURELY_UNSET}\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tomgraph"))
        .args(["--config", unset.to_str().unwrap(), "ingest"])
        .env_remove("TOMGRAPH_TEST_SURELY_UNSET")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("TOMGRAPH_TEST_SURELY_UNSET"));
}

#[test]
fn review_import_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let csv = out.join("bogus.csv");
    std::fs::write(&csv, "id,verdict,notes\nno-such-question,pass,\n").unwrap();
    let o = tomgraph(out, &["review-import", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-question"));
}

#[test]
fn out_of_order_stage_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = tomgraph(dir.path(), &["build-kg"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tomgraph(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(1));
}
