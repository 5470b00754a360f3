mod common;

use std::path::Path;

use tomgraph::config::{conditions_for, ContextSetting, TripleSetting};
use tomgraph::evalharness::{ContextMode, EvalCondition, Prediction, ReportLayout};
use tomgraph::pipeline::{Pipeline, PipelineError};
use tomgraph::qagen::QuestionState;
use tomgraph::util::from_jsonl;

/// Copies the fixture tree into `dir`, dropping replay entries whose comment
/// starts with `drop_prefix`.
fn copy_fixtures(dir: &Path, drop_prefix: Option<&str>) -> Pipeline {
    let src = common::fixtures_dir();
    for sub in ["books", "aliases"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
        for e in std::fs::read_dir(src.join(sub)).unwrap() {
            let e = e.unwrap();
            std::fs::copy(e.path(), dir.join(sub).join(e.file_name())).unwrap();
        }
    }
    std::fs::copy(src.join("pipeline.toml"), dir.join("pipeline.toml")).unwrap();
    let script: String = std::fs::read_to_string(src.join("replay.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            drop_prefix.is_none_or(|p| !v["comment"].as_str().unwrap_or("").starts_with(p))
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.join("replay.jsonl"), script).unwrap();
    Pipeline::from_config_file(&dir.join("pipeline.toml")).unwrap()
}

#[test]
fn fixture_chain_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = common::run_fixture_chain(dir.path());
    let layout = p.layout();
    let lines = |path: &Path| std::fs::read_to_string(path).unwrap().lines().count();
    assert_eq!(lines(&layout.batches()), 3);
    assert_eq!(lines(&layout.triples()), 17);
    assert_eq!(lines(&layout.rejects()), 2);

    let qs = p.load_questions().unwrap();
    assert_eq!(qs.len(), 12);
    let regenerated: Vec<_> = qs.iter().filter(|q| q.attempt == 2).collect();
    assert_eq!(regenerated.len(), 1);
    assert!(qs.iter().all(|q| q.state == QuestionState::LlmVerified));

    let preds: Vec<Prediction> = from_jsonl(&std::fs::read_to_string(layout.predictions()).unwrap()).unwrap();
    assert_eq!(preds.len(), 48);
    assert_eq!(preds.iter().filter(|p| p.letter.is_none()).count(), 2);

    let report = p.report(ReportLayout::Plain).unwrap();
    let rows: Vec<Vec<&str>> = report.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[2], ["gpt-4o-mini", "66.67", "66.67", "66.67", "100.00", "75.00"]);
    assert_eq!(rows[3], ["w", "Triple", "100.00", "100.00", "100.00", "100.00", "100.00"]);
    for m in ["ingest", "extract", "build-kg", "genqa", "verify", "eval"] {
        let text = std::fs::read_to_string(layout.manifest(m)).unwrap();
        assert!(!text.contains(dir.path().to_str().unwrap()), "{m} manifest leaks an absolute path");
    }
}

#[test]
fn triple_conditions_need_the_graph() {
    let dir = tempfile::tempdir().unwrap();
    let p = copy_fixtures(dir.path(), None);
    let gate = p.gateway().unwrap();
    p.ingest().unwrap();
    p.extract(&gate).unwrap();
    assert!(matches!(p.genqa(&gate), Err(PipelineError::MissingUpstreamArtifact { stage: "build-kg", .. })));
    p.build_kg().unwrap();
    p.genqa(&gate).unwrap();
    std::fs::remove_dir_all(p.layout().kg_dir()).unwrap();
    let with = [EvalCondition { context: ContextMode::CurrentPlot, triples: true }];
    let err = p.eval(&gate, &with).unwrap_err();
    assert!(matches!(err, PipelineError::MissingUpstreamArtifact { .. }), "{err}");
    assert!(!err.is_backend_failure());
    let without = [EvalCondition { context: ContextMode::CurrentPlot, triples: false }];
    let r = p.eval(&gate, &without).unwrap();
    assert_eq!(r.backend_failures, 0);
}

#[test]
fn missing_replay_entries_become_unparseable() {
    let dir = tempfile::tempdir().unwrap();
    let p = copy_fixtures(dir.path(), Some("p3 Desire without triples"));
    let gate = p.gateway().unwrap();
    p.ingest().unwrap();
    p.extract(&gate).unwrap();
    p.build_kg().unwrap();
    p.genqa(&gate).unwrap();
    p.verify(&gate).unwrap();
    let r = p.eval(&gate, &conditions_for(ContextSetting::Both, TripleSetting::Both)).unwrap();
    assert_eq!(r.backend_failures, 2);
    let preds: Vec<Prediction> = from_jsonl(&std::fs::read_to_string(p.layout().predictions()).unwrap()).unwrap();
    assert_eq!(preds.len(), 48);
    let failed: Vec<_> = preds.iter().filter(|p| p.error.is_some()).collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|p| p.letter.is_none() && !p.condition.triples));
    let csv = p.report(ReportLayout::Csv).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("gpt-4o-mini,current,off,") && l.ends_with(",12,2")), "{csv}");
}

#[test]
fn review_round_trip_and_finetune_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = common::run_fixture_chain(dir.path());
    let out = dir.path().join("review.csv");
    p.review_export(Some(&out)).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 13);
    // the last two columns are verdict and notes, both blank on export
    let filled: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l}\n") } else { format!("{}pass,\n", &l[..l.len() - 1]) })
        .collect();
    std::fs::write(&out, filled).unwrap();
    let r = p.review_import(&out).unwrap();
    assert!(r.user_errors.is_empty(), "{:?}", r.user_errors);
    assert!(p.load_questions().unwrap().iter().all(|q| q.state == QuestionState::HumanVerified));

    let r = p.emit_ft(TripleSetting::Both, false).unwrap();
    assert!(r.user_errors.is_empty());
    let ft = p.layout().ft_dir();
    let with = std::fs::read_to_string(ft.join("train.with_triples.jsonl")).unwrap();
    let without = std::fs::read_to_string(ft.join("train.no_triples.jsonl")).unwrap();
    assert_eq!(with.lines().count(), 12);
    assert_eq!(without.lines().count(), 12);
    for l in without.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let out = v["output"].as_str().unwrap();
        assert!(out.starts_with("Answer:\n{answer: ") && out.ends_with('}'), "{out}");
    }
    for l in with.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["output"].as_str().unwrap().starts_with("Relevant mental state triples:\n(King Lear, "));
    }
}
