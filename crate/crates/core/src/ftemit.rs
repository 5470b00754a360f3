//! Fine-tuning data: triple-first training examples and book-level
//! out-of-distribution splits.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::corpus::{Book, Corpus};
use crate::evalharness::{assemble_context, ContextMode, ContextOptions, EvalCondition, EvalError, PromptVariant};
use crate::qagen::{QuestionState, TomQuestion};
use crate::templates::TemplateSet;
use crate::tkg::{KgError, TemporalKg};
use crate::triples::Dimension;
use crate::util;

#[derive(Debug, thiserror::Error)]
pub enum FtError {
    #[error("question `{0}` has not passed human review")]
    UnverifiedQuestion(String),
    #[error("no knowledge graph loaded for book `{0}`")]
    MissingKg(String),
    #[error("book `{0}` is not in the corpus")]
    UnknownBook(String),
    #[error("question `{0}` landed in both splits")]
    OverlappingSplit(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    OodTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::OodTest => "ood_test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input: String,
    pub output: String,
    pub with_triples: bool,
    pub question_id: String,
    pub split: Split,
}

/// The JSONL line shape of a training file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmitOptions {
    pub with_triples: bool,
    /// Accept questions that have not reached human review.
    pub waive_verification: bool,
}

/// Completion text: the character's active triples then the answer object,
/// or the answer object alone.
pub fn render_output(triple_lines: Option<&[String]>, answer: char) -> String {
    let mut out = String::new();
    if let Some(lines) = triple_lines {
        out.push_str("Relevant mental state triples:\n");
        for l in lines {
            out.push_str(l);
            out.push('\n');
        }
    }
    out.push_str(&format!("Answer:\n{{answer: {answer}}}"));
    out
}

/// The input is the appendix-style evaluation prompt over the current plot
/// with no triple block, so the model has to produce the triples itself.
pub fn emit_example(
    templates: &TemplateSet,
    question: &TomQuestion,
    book: &Book,
    kg: Option<&TemporalKg>,
    opts: EmitOptions,
    split: Split,
) -> Result<TrainingExample, FtError> {
    if question.state != QuestionState::HumanVerified && !opts.waive_verification {
        return Err(FtError::UnverifiedQuestion(question.id.clone()));
    }
    let condition = EvalCondition { context: ContextMode::CurrentPlot, triples: false };
    let ctx = ContextOptions { variant: PromptVariant::Appendix, window: None };
    let prompt = assemble_context(templates, question, book, None, condition, ctx)?;
    let lines = if opts.with_triples {
        let kg = kg.ok_or_else(|| FtError::MissingKg(book.id.clone()))?;
        let lines: Vec<String> = match kg.state_at(&question.character, question.plot_index) {
            Ok(ts) => ts.iter().map(|t| t.render()).collect(),
            Err(KgError::UnknownCharacter(_)) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Some(lines)
    } else {
        None
    };
    Ok(TrainingExample {
        input: prompt.text,
        output: render_output(lines.as_deref(), question.correct.letter()),
        with_triples: opts.with_triples,
        question_id: question.id.clone(),
        split,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Book ids or titles held out for testing.
    pub ood_books: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<String>,
    pub ood: Vec<String>,
    /// Book id to split.
    pub books: BTreeMap<String, Split>,
    /// Question counts per split and dimension.
    pub counts: BTreeMap<Split, BTreeMap<Dimension, u64>>,
}

impl SplitResult {
    pub fn split_of(&self, book_id: &str) -> Split {
        self.books.get(book_id).copied().unwrap_or(Split::Train)
    }

    /// Book-to-split listing plus counts, as written next to training files.
    pub fn manifest_json(&self) -> Result<String, FtError> {
        let counts: BTreeMap<&str, BTreeMap<String, u64>> = self
            .counts
            .iter()
            .map(|(s, m)| (s.as_str(), m.iter().map(|(d, n)| (d.as_str().to_lowercase(), *n)).collect()))
            .collect();
        let books: BTreeMap<&str, &str> = self.books.iter().map(|(b, s)| (b.as_str(), s.as_str())).collect();
        let v = serde_json::json!({
            "books": books,
            "counts": counts,
            "train_questions": self.train.len(),
            "ood_questions": self.ood.len(),
        });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

/// Partitions questions by book membership. Question ids in each split are
/// sorted.
pub fn split_ood(corpus: &Corpus, questions: &[TomQuestion], spec: &SplitSpec) -> Result<SplitResult, FtError> {
    let mut ood_ids = BTreeSet::new();
    for name in &spec.ood_books {
        let book = corpus.find_book(name).ok_or_else(|| FtError::UnknownBook(name.clone()))?;
        ood_ids.insert(book.id.clone());
    }
    let mut out = SplitResult::default();
    for b in &corpus.books {
        out.books.insert(b.id.clone(), if ood_ids.contains(&b.id) { Split::OodTest } else { Split::Train });
    }
    for q in questions {
        let split = out.split_of(&q.book_id);
        match split {
            Split::Train => out.train.push(q.id.clone()),
            Split::OodTest => out.ood.push(q.id.clone()),
        }
        *out.counts.entry(split).or_default().entry(q.dimension).or_default() += 1;
    }
    out.train.sort();
    out.ood.sort();
    if let Some(shared) = out.train.iter().find(|id| out.ood.binary_search(id).is_ok()) {
        return Err(FtError::OverlappingSplit(shared.clone()));
    }
    Ok(out)
}

/// Emits examples for every question, sorted by question id.
pub fn emit_all(
    templates: &TemplateSet,
    corpus: &Corpus,
    kgs: &BTreeMap<String, TemporalKg>,
    questions: &[TomQuestion],
    split: &SplitResult,
    opts: EmitOptions,
) -> Result<Vec<TrainingExample>, FtError> {
    let mut qs: Vec<&TomQuestion> = questions.iter().collect();
    qs.sort_by(|a, b| a.id.cmp(&b.id));
    qs.into_iter()
        .filter(|q| opts.waive_verification || q.state == QuestionState::HumanVerified)
        .map(|q| {
            let book = corpus.book(&q.book_id).ok_or_else(|| FtError::UnknownBook(q.book_id.clone()))?;
            emit_example(templates, q, book, kgs.get(&q.book_id), opts, split.split_of(&q.book_id))
        })
        .collect()
}

/// Writes `{input, output}` lines and returns the record count.
pub fn write_training_file<'a>(
    examples: impl IntoIterator<Item = &'a TrainingExample>,
    path: &Path,
) -> Result<usize, FtError> {
    let mut text = String::new();
    let mut n = 0;
    for e in examples {
        text.push_str(&serde_json::to_string(&TrainingRecord { input: e.input.clone(), output: e.output.clone() })?);
        text.push('\n');
        n += 1;
    }
    util::write_atomic(path, text.as_bytes())?;
    Ok(n)
}
