mod common;

use proptest::prelude::*;
use std::collections::BTreeMap;

use tomgraph::corpus::{
    build_turn, ingest_corpus, Book, Conversation, Corpus, CorpusFormat, IngestOptions, Plot, PlotRef, SegmentKind,
    UtteranceSegment,
};
use tomgraph::evalharness::{assemble_context, parse_answer, ContextMode, ContextOptions, EvalCondition, PromptVariant};
use tomgraph::qagen::{Choice, QuestionState, TomQuestion};
use tomgraph::templates::TemplateSet;
use tomgraph::tkg::{contradicts, jaccard, MergeConfig, TemporalKg};
use tomgraph::triples::{parse_triple_entry, parse_triple_response, Dimension, MentalStateTriple, TripleBatch};

fn plain_text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z ,.!?']{0,24}".prop_map(|s| s.trim().to_string())
}

fn segment() -> impl Strategy<Value = UtteranceSegment> {
    (0..3u8, plain_text()).prop_map(|(k, text)| match k {
        0 => UtteranceSegment::speech(text),
        1 => UtteranceSegment::action(text),
        _ => UtteranceSegment::thought(text),
    })
}

/// Adjacent speech merges into one segment once the delimiters are gone.
fn merge_speech(segs: &[UtteranceSegment]) -> Vec<UtteranceSegment> {
    let mut out: Vec<UtteranceSegment> = Vec::new();
    for s in segs {
        match out.last_mut() {
            Some(last) if last.kind == SegmentKind::Speech && s.kind == SegmentKind::Speech => {
                last.text = format!("{} {}", last.text, s.text);
            }
            _ => out.push(s.clone()),
        }
    }
    out
}

fn speaker() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["King Lear", "Goneril", "Regan", "Cordelia", "Kent", "Fool"]).prop_map(String::from)
}

fn conversation(book: &str, index: u32) -> impl Strategy<Value = Conversation> {
    let book = book.to_string();
    (plain_text(), prop::collection::vec((speaker(), prop::collection::vec(segment(), 1..4)), 1..5)).prop_map(
        move |(env, turns)| {
            let turns: Vec<_> = turns
                .into_iter()
                .map(|(s, segs)| {
                    let line = segs.iter().map(UtteranceSegment::render).collect::<Vec<_>>().join(" ");
                    build_turn(&s, &line).unwrap().turn
                })
                .collect();
            let mut cast: Vec<String> = Vec::new();
            for t in &turns {
                if !cast.contains(&t.speaker) {
                    cast.push(t.speaker.clone());
                }
            }
            Conversation { plot_ref: PlotRef { book_id: book.clone(), index }, environment: env, cast, turns }
        },
    )
}

fn book() -> impl Strategy<Value = Book> {
    (1usize..4)
        .prop_flat_map(|n| {
            let plots: Vec<_> = (1..=n as u32)
                .map(|i| (plain_text(), plain_text(), prop::collection::vec(conversation("bk", i), 1..3)))
                .collect();
            plots
        })
        .prop_map(|plots| Book {
            id: "bk".into(),
            title: "Test Book".into(),
            plots: plots
                .into_iter()
                .enumerate()
                .map(|(i, (summary, scenario, conversations))| Plot {
                    book_id: "bk".into(),
                    index: i as u32 + 1,
                    summary,
                    scenario,
                    conversations,
                })
                .collect(),
        })
}

fn lear_question(plot_index: u32, triples_for: &str) -> TomQuestion {
    TomQuestion {
        id: "q".into(),
        book_id: "bk".into(),
        plot_index,
        character: triples_for.into(),
        dimension: Dimension::Belief,
        scenario: String::new(),
        reasoning: String::new(),
        stem: "What does King Lear believe?".into(),
        options: ["w", "x", "y", "z"].map(String::from),
        correct: Choice::A,
        state: QuestionState::LlmVerified,
        attempt: 1,
        permutation: [0, 1, 2, 3],
        review_notes: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn segmentation_reconstructs_the_source(segs in prop::collection::vec(segment(), 1..8)) {
        let line = segs.iter().map(UtteranceSegment::render).collect::<Vec<_>>().join(" ");
        let parsed = build_turn("Kent", &line).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(&parsed.turn.segments, &merge_speech(&segs));
        prop_assert_eq!(parsed.turn.utterance(), line);
    }

    #[test]
    fn unbalanced_input_never_loses_text(s in "[a-z \\[\\]()]{1,30}") {
        prop_assume!(!s.trim().is_empty());
        let (segs, _) = tomgraph::corpus::parse_utterance(&s);
        let kept: String = segs.iter().map(UtteranceSegment::render).collect::<Vec<_>>().join("");
        let squash = |x: &str| x.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        prop_assert_eq!(squash(&kept), squash(&s));
    }

    #[test]
    fn normalized_corpus_round_trips(b in book()) {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus { books: vec![b], registries: BTreeMap::new() };
        corpus.write_normalized(dir.path()).unwrap();
        let back = ingest_corpus(dir.path(), CorpusFormat::Normalized, &IngestOptions::default()).unwrap();
        prop_assert_eq!(back.books, corpus.books);
    }

    #[test]
    fn distinct_speaker_count_matches_brute_force(b in book()) {
        let corpus = Corpus { books: vec![b.clone()], registries: BTreeMap::new() };
        let stats = tomgraph::corpus::corpus_stats(&corpus);
        let mut sum = 0;
        let mut convs = 0;
        for c in b.plots.iter().flat_map(|p| &p.conversations) {
            let mut names: Vec<&str> = c.turns.iter().map(|t| t.speaker.as_str()).collect();
            names.sort();
            names.dedup();
            sum += names.len() as u64;
            convs += 1;
        }
        prop_assert_eq!(stats.total.speaker_sum, sum);
        prop_assert_eq!(stats.total.conversations, convs);
    }

    #[test]
    fn triple_render_parse_identity(
        subject in "[A-Z][a-z]{1,8}( [A-Z][a-z]{1,8})?",
        predicate in prop::sample::select(vec!["BelievesAboutKent", "FeelsTowards", "DesiresTo", "IntendsTo", "FeelsTowardsRegan"]),
        object in "[a-z]{1,8}([ ,'][a-z]{1,8}){0,5}",
    ) {
        let entry = format!("({subject}, {predicate}, {object})");
        let raw = parse_triple_entry(&entry).unwrap();
        prop_assert_eq!(raw.render(), entry.clone());
        let t = MentalStateTriple::from_raw(&raw, "bk", 1, 0).unwrap();
        prop_assert_eq!(t.render(), entry.clone());
        let batch = TripleBatch::new("bk", &subject, 1, vec![t.clone()], String::new());
        let parsed = parse_triple_response(&batch.render()).unwrap();
        prop_assert_eq!(parsed.entries, vec![raw]);
    }

    #[test]
    fn answer_object_is_found_in_noise(pre in "[a-z .\n]{0,40}", post in "[a-z .\n]{0,40}", k in 0usize..4) {
        let c = Choice::ALL[k];
        let text = format!("{pre}\n{{answer: {c}}}\n{post}");
        prop_assert_eq!(parse_answer(&text), Some(c));
    }

    #[test]
    fn overlap_measures_are_symmetric(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
        prop_assert!((jaccard(&a, &b) - jaccard(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&jaccard(&a, &b)));
        let ants = MergeConfig::default().antonyms;
        prop_assert_eq!(contradicts(&a, &b, &ants), contradicts(&b, &a, &ants));
    }

    #[test]
    fn random_graphs_agree_with_oracle(seed in any::<u64>()) {
        let case = common::random_case(seed);
        prop_assert!(case.edge_count() <= 50);
        if let Err(e) = common::check_case(&case) {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn graph_file_round_trips(seed in any::<u64>()) {
        let case = common::random_case(seed);
        let kg = common::build(&case, case.plot_count);
        let text = kg.to_jsonl();
        let back = TemporalKg::from_jsonl(&text).unwrap();
        prop_assert_eq!(back.to_jsonl(), text);
        prop_assert_eq!(back, kg);
    }

    #[test]
    fn context_assembly_is_pure_and_extended_is_longer(b in book(), seed in any::<u64>(), window in prop::option::of(1u32..4)) {
        let case = common::random_case(seed);
        let kg = common::build(&case, case.plot_count);
        let templates = TemplateSet::default();
        let t = b.plot_count();
        let q = lear_question(t, "Lear");
        let opts = ContextOptions { variant: PromptVariant::Appendix, window };
        for triples in [false, true] {
            let cur = EvalCondition { context: ContextMode::CurrentPlot, triples };
            let ext = EvalCondition { context: ContextMode::CurrentPlusPrevSummaries, triples };
            let a = assemble_context(&templates, &q, &b, Some(&kg), cur, opts).unwrap();
            let again = assemble_context(&templates, &q, &b, Some(&kg), cur, opts).unwrap();
            prop_assert_eq!(&a, &again);
            let e = assemble_context(&templates, &q, &b, Some(&kg), ext, opts).unwrap();
            prop_assert!(e.token_estimate >= a.token_estimate);
            prop_assert!(e.text.len() >= a.text.len());
            if t == 1 {
                prop_assert_eq!(&e.text, &a.text);
            }
            prop_assert!(a.text.contains(&b.plots[t as usize - 1].summary));
        }
    }
}
