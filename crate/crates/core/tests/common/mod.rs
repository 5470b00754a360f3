#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use tomgraph::config::conditions_for;
use tomgraph::config::{ContextSetting, TripleSetting};
use tomgraph::evalharness::ReportLayout;
use tomgraph::pipeline::Pipeline;
use tomgraph::tkg::{is_acyclic, MergeConfig, MergeMode, TemporalKg};
use tomgraph::triples::{parse_triple_entry, MentalStateTriple, TripleBatch};

/// Model output for King Lear in the extraction example, double-brace wrapper
/// and unquoted entries included.
pub const LEAR_EXTRACTION_OUTPUT: &str = r#"{{
    "Target Character":
        [
            (King Lear, DesiresToKnow, which daughter loves King Lear most),
            (King Lear, IntendsTo, divide the kingdom based on his daughters' declarations of love),
            (King Lear, BelievesAboutCordelia, Cordelia's silence is a sign of defiance and disrespect),
            (King Lear, FeelsTowardsCordelia, wounded and betrayed by Cordelia's refusal to flatter King Lear),
            (King Lear, BelievesAboutGoneril, Goneril speaks well and expresses her love convincingly),
            (King Lear, FeelsTowardsCordelia, disappointed and shocked by Cordelia's honesty)
        ]
}}"#;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Loads the shipped fixture configuration with its artifact root moved to `out`.
pub fn fixture_pipeline(out: &Path) -> Pipeline {
    let mut p = Pipeline::from_config_file(&fixtures_dir().join("pipeline.toml")).expect("fixture config loads");
    p.config.out_dir = out.to_path_buf();
    p
}

/// ingest, extract, build-kg, genqa, verify, eval over all four conditions,
/// then the plain report written next to the scores.
pub fn run_fixture_chain(out: &Path) -> Pipeline {
    let p = fixture_pipeline(out);
    let gate = p.gateway().expect("replay gateway");
    p.ingest().expect("ingest");
    clean(p.extract(&gate).expect("extract"));
    clean(p.build_kg().expect("build-kg"));
    clean(p.genqa(&gate).expect("genqa"));
    clean(p.verify(&gate).expect("verify"));
    clean(p.eval(&gate, &conditions_for(ContextSetting::Both, TripleSetting::Both)).expect("eval"));
    let report = p.report(ReportLayout::Plain).expect("report");
    std::fs::write(out.join("report.plain.txt"), report).expect("write report");
    p
}

fn clean(r: tomgraph::pipeline::StageReport) {
    assert_eq!(r.backend_failures, 0, "{}", r.summary);
    assert!(r.user_errors.is_empty(), "{:?}", r.user_errors);
}

/// Every file under `root` keyed by relative path.
pub fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for e in std::fs::read_dir(&p).unwrap() {
                stack.push(e.unwrap().path());
            }
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// Random temporal graphs and their oracles
// ---------------------------------------------------------------------------

const CHARACTERS: [&str; 5] = ["Lear", "Kent", "Edgar", "Regan", "Fool"];
const PREDICATES: [&str; 7] = [
    "BelievesAboutKent",
    "FeelsTowardsKent",
    "FeelsTowardsRegan",
    "DesiresTo",
    "IntendsTo",
    "Believes",
    "DesiresForEdgar",
];
const OBJECTS: [&str; 8] = [
    "Kent is loyal",
    "Kent is disloyal",
    "Kent is not loyal",
    "the kingdom is safe",
    "revenge on the sisters",
    "peace in the kingdom",
    "Edgar to be safe",
    "trust in Kent",
];

#[derive(Debug, Clone)]
pub struct KgCase {
    pub seed: u64,
    pub plot_count: u32,
    pub mode: MergeMode,
    pub batches: Vec<TripleBatch>,
}

impl KgCase {
    pub fn edge_count(&self) -> usize {
        self.batches.iter().map(|b| b.triples.len()).sum()
    }
}

/// At most 50 edges, 5 characters and 10 plots. Batches arrive in plot order,
/// sometimes twice for one character within a plot.
pub fn random_case(seed: u64) -> KgCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plot_count = rng.random_range(1..=10u32);
    let n_chars = rng.random_range(1..=5usize);
    let chars = &CHARACTERS[..n_chars];
    let mode = if rng.random_bool(0.5) { MergeMode::TrustLlmDiff } else { MergeMode::DeterministicMerge };
    let mut batches = Vec::new();
    let mut budget = 50usize;
    let mut next_id = 0usize;
    for p in 1..=plot_count {
        for c in chars {
            let repeats = match rng.random_range(0..10) {
                0..=3 => 0,
                4..=8 => 1,
                _ => 2,
            };
            for _ in 0..repeats {
                let n = rng.random_range(0..=4usize).min(budget);
                budget -= n;
                let triples = (0..n)
                    .map(|i| {
                        let pred = PREDICATES.choose(&mut rng).unwrap();
                        let obj = OBJECTS.choose(&mut rng).unwrap();
                        let raw = parse_triple_entry(&format!("({c}, {pred}, {obj})")).unwrap();
                        let mut t = MentalStateTriple::from_raw(&raw, "bk", p, i).unwrap();
                        t.id = format!("e{next_id:03}");
                        next_id += 1;
                        t
                    })
                    .collect();
                batches.push(TripleBatch::new("bk", c, p, triples, String::new()));
            }
        }
    }
    KgCase { seed, plot_count, mode, batches }
}

/// Inserts the batches whose plot is at most `upto`.
pub fn build(case: &KgCase, upto: u32) -> TemporalKg {
    let cfg = MergeConfig { mode: case.mode, ..MergeConfig::default() };
    let mut kg = TemporalKg::new("bk", case.plot_count);
    for b in case.batches.iter().filter(|b| b.plot_index <= upto) {
        kg.insert_batch(b, &cfg).unwrap_or_else(|e| panic!("seed {}: {e}", case.seed));
    }
    kg
}

/// Edges of `character` that nothing has ended, by plot then insertion.
fn naive_current(kg: &TemporalKg, character: &str) -> Vec<String> {
    let ended: BTreeSet<&str> = kg
        .links()
        .iter()
        .map(|l| l.old_id.as_str())
        .chain(kg.retirements().iter().map(|r| r.id.as_str()))
        .collect();
    let mut es: Vec<&MentalStateTriple> =
        kg.edges().iter().filter(|e| e.subject == character && !ended.contains(e.id.as_str())).collect();
    es.sort_by_key(|e| e.plot_index);
    es.into_iter().map(|e| e.id.clone()).collect()
}

fn content(t: &MentalStateTriple) -> (String, String, String) {
    (t.subject.clone(), t.predicate_raw.to_lowercase(), t.object.to_lowercase())
}

/// Links run forward in time and form no cycle, checked by brute force.
pub fn check_links(kg: &TemporalKg) -> Result<(), String> {
    for l in kg.links() {
        let (old, new) = (kg.edge(&l.old_id).ok_or("dangling old")?, kg.edge(&l.new_id).ok_or("dangling new")?);
        if old.plot_index >= new.plot_index {
            return Err(format!("link {} -> {} goes back in time", l.old_id, l.new_id));
        }
    }
    let next: HashMap<&str, Vec<&str>> = kg.links().iter().fold(HashMap::new(), |mut m, l| {
        m.entry(l.old_id.as_str()).or_default().push(l.new_id.as_str());
        m
    });
    for start in next.keys() {
        let mut stack: Vec<&str> = next[start].clone();
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == *start {
                return Err(format!("cycle through {start}"));
            }
            if seen.insert(n) {
                stack.extend(next.get(n).into_iter().flatten().copied());
            }
        }
    }
    if !is_acyclic(kg.links()) {
        return Err("is_acyclic disagrees with the search".into());
    }
    Ok(())
}

/// Compares `state_at` and `timeline` with replay-based oracles for every
/// character and plot.
pub fn check_case(case: &KgCase) -> Result<(), String> {
    let full = build(case, case.plot_count);
    full.verify_invariants().map_err(|e| e.to_string())?;
    check_links(&full)?;
    let chars: Vec<String> = full.nodes().map(|n| n.name.clone()).collect();
    let prefixes: Vec<TemporalKg> = (0..=case.plot_count).map(|t| build(case, t)).collect();
    for c in &chars {
        for t in 1..=case.plot_count + 1 {
            let got: Vec<String> = full.state_at(c, t).map_err(|e| e.to_string())?.iter().map(|e| e.id.clone()).collect();
            let prefix = &prefixes[t.min(case.plot_count) as usize];
            let want = naive_current(prefix, c);
            if got != want {
                return Err(format!("seed {} {c}@{t}: state_at {got:?} vs replay {want:?}", case.seed));
            }
            if case.mode == MergeMode::TrustLlmDiff {
                let mut got_c: Vec<_> = full.state_at(c, t).unwrap().into_iter().map(content).collect();
                let mut want_c: Vec<_> = case
                    .batches
                    .iter()
                    .rfind(|b| b.character == *c && b.plot_index <= t)
                    .map(|b| b.triples.iter().map(content).collect())
                    .unwrap_or_default();
                got_c.sort();
                want_c.sort();
                if got_c != want_c {
                    return Err(format!("seed {} {c}@{t}: state differs from the last batch", case.seed));
                }
            }
        }
        let tl = full.timeline(c, None).map_err(|e| e.to_string())?;
        let mut all: Vec<&MentalStateTriple> = full.edges().iter().filter(|e| e.subject == *c).collect();
        all.sort_by_key(|e| e.plot_index);
        if tl.iter().map(|r| &r.triple.id).ne(all.iter().map(|e| &e.id)) {
            return Err(format!("seed {} {c}: timeline order", case.seed));
        }
        for r in &tl {
            if let Some(end) = r.ended_at {
                if end < r.plot_index || end > case.plot_count {
                    return Err(format!("seed {} {}: end {end} outside its life", case.seed, r.triple.id));
                }
            }
            for t in 1..=case.plot_count {
                let held = full.state_at(c, t).unwrap().iter().any(|e| e.id == r.triple.id);
                let expect = t >= r.plot_index && r.ended_at.is_none_or(|e| t < e);
                if held != expect {
                    return Err(format!("seed {} {}@{t}: timeline and state_at disagree", case.seed, r.triple.id));
                }
            }
            if let Some(link) = &r.supersedes {
                if link.new_id != r.triple.id || r.triple.supersedes.as_deref() != Some(link.old_id.as_str()) {
                    return Err(format!("seed {} {}: supersedes mismatch", case.seed, r.triple.id));
                }
            }
        }
        for d in tomgraph::triples::Dimension::ALL {
            let sub = full.timeline(c, Some(d)).unwrap();
            if sub.iter().map(|r| &r.triple.id).ne(tl.iter().filter(|r| r.triple.dimension == d).map(|r| &r.triple.id)) {
                return Err(format!("seed {} {c}: {d} timeline filter", case.seed));
            }
        }
    }
    Ok(())
}
