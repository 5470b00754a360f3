//! Multiple-choice ToM questions: generation prompts, response parsing,
//! option shuffling, and the LLM + human verification workflow.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use crate::corpus::Plot;
use crate::llmgate::{ChatRequest, GateError, Gateway};
use crate::templates::{Template, TemplateError};
use crate::triples::{render_previous, Dimension, MentalStateTriple};
use crate::util::{normalize_ws_lower, parse_json_lenient, sha256_hex, slug};

#[derive(Debug, thiserror::Error)]
pub enum QaError {
    #[error("{character} does not speak in plot {plot}")]
    CharacterAbsent { character: String, plot: u32 },
    #[error("response has no {0} question")]
    MissingDimension(Dimension),
    #[error("{dimension} question has {count} options, expected 4")]
    BadOptionCount { dimension: Dimension, count: usize },
    #[error("{dimension} question: cannot identify a single correct option from `{answer}`")]
    AmbiguousCorrect { dimension: Dimension, answer: String },
    #[error("{dimension} question repeats an option")]
    DuplicateOptions { dimension: Dimension },
    #[error("{dimension} question lacks field `{field}`")]
    MissingField { dimension: Dimension, field: &'static str },
    #[error("response is not a JSON object")]
    UnparseableResponse,
    #[error("question {id}: cannot move from {from:?} to {to:?}")]
    IllegalTransition { id: String, from: QuestionState, to: QuestionState },
    #[error("question {id}: {attempts} attempts used, limit {max}")]
    AttemptsExhausted { id: String, attempts: u32, max: u32 },
    #[error("unknown question id `{0}`")]
    UnknownQuestionId(String),
    #[error("review row {row}: {reason}")]
    MalformedVerdictRow { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gate(#[from] GateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    C,
    D,
}

impl Choice {
    pub const ALL: [Choice; 4] = [Choice::A, Choice::B, Choice::C, Choice::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Choice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Choice::A),
            "B" | "b" => Ok(Choice::B),
            "C" | "c" => Ok(Choice::C),
            "D" | "d" => Ok(Choice::D),
            other => Err(format!("`{other}` is not an option letter")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionState {
    Generated,
    LlmVerified,
    HumanVerified,
    Rejected,
}

impl QuestionState {
    pub fn can_move_to(self, to: QuestionState) -> bool {
        use QuestionState::*;
        matches!(
            (self, to),
            (Generated, LlmVerified) | (Generated, Rejected) | (LlmVerified, HumanVerified) | (LlmVerified, Rejected) | (Rejected, Generated)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TomQuestion {
    pub id: String,
    pub book_id: String,
    pub plot_index: u32,
    pub character: String,
    pub dimension: Dimension,
    pub scenario: String,
    pub reasoning: String,
    pub stem: String,
    /// Option texts without labels, in display order A..D.
    pub options: [String; 4],
    pub correct: Choice,
    pub state: QuestionState,
    pub attempt: u32,
    /// `permutation[i]` is the position in the model's answer list of displayed option `i`.
    pub permutation: [u8; 4],
    /// Notes from the most recent failed review.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_notes: Option<String>,
}

impl TomQuestion {
    pub fn make_id(book_id: &str, plot_index: u32, character: &str, dimension: Dimension) -> String {
        format!("{book_id}-p{plot_index:02}-{}-{}", slug(character), dimension.as_str().to_lowercase())
    }

    /// Options as `A. text` lines.
    pub fn render_choices(&self) -> String {
        Choice::ALL.iter().map(|c| format!("{c}. {}", self.options[c.index()])).collect::<Vec<_>>().join("\n")
    }

    pub fn distractors(&self) -> impl Iterator<Item = &str> {
        let correct = self.correct.index();
        self.options.iter().enumerate().filter(move |(i, _)| *i != correct).map(|(_, o)| o.as_str())
    }

    /// Moves to `to`, bumping the attempt on regeneration.
    pub fn transition(&mut self, to: QuestionState) -> Result<(), QaError> {
        if !self.state.can_move_to(to) {
            return Err(QaError::IllegalTransition { id: self.id.clone(), from: self.state, to });
        }
        if to == QuestionState::Generated {
            self.attempt += 1;
        }
        self.state = to;
        Ok(())
    }

    /// Four options, one correct letter, no duplicates after normalization.
    pub fn check_invariants(&self) -> Result<(), QaError> {
        check_distinct(self.dimension, &self.options)
    }
}

fn check_distinct(dimension: Dimension, options: &[String]) -> Result<(), QaError> {
    let mut seen: Vec<String> = Vec::new();
    for o in options {
        let n = normalize_ws_lower(o);
        if n.is_empty() || seen.contains(&n) {
            return Err(QaError::DuplicateOptions { dimension });
        }
        seen.push(n);
    }
    Ok(())
}

pub fn build_question_prompt(
    template: &Template,
    plot: &Plot,
    character: &str,
    triples: &[MentalStateTriple],
    model_id: &str,
    seed: Option<u64>,
) -> Result<ChatRequest, QaError> {
    Ok(ChatRequest::user_prompt(model_id, question_prompt_text(template, plot, character, triples)?, seed))
}

fn question_prompt_text(
    template: &Template,
    plot: &Plot,
    character: &str,
    triples: &[MentalStateTriple],
) -> Result<String, QaError> {
    if !plot.has_speaker(character) {
        return Err(QaError::CharacterAbsent { character: character.into(), plot: plot.index });
    }
    Ok(template.render(&[
        ("plot_summary", plot.summary.as_str()),
        ("scenario", plot.scenario.as_str()),
        ("dialogues", plot.render_dialogues_for(character).trim_end()),
        ("character", character),
        ("triples", &render_previous(triples)),
    ])?)
}

static OPTION_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[(\[]?([A-Da-d])\s*[)\].:]\s*").expect("valid regex"));
static BARE_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:option\s+)?[(\[]?([A-Da-d])[)\].:]?\s*$").expect("valid regex"));
static LABELLED_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:option\s+)?[(\[]?([A-D])[)\].:]\s+\S").expect("valid regex"));

fn strip_label(option: &str) -> String {
    OPTION_LABEL.replace(option, "").trim().to_string()
}

/// The model's raw question block before shuffling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftQuestion {
    pub dimension: Dimension,
    pub scenario: String,
    pub reasoning: String,
    pub stem: String,
    pub options: [String; 4],
    pub correct: Choice,
}

fn dimension_of_key(key: &str) -> Option<Dimension> {
    let k = key.to_lowercase();
    if !k.contains("question") {
        return None;
    }
    Dimension::ALL.into_iter().find(|d| k.trim_start().starts_with(&d.as_str().to_lowercase()))
}

fn collect_blocks<'a>(v: &'a Value, out: &mut Vec<(Dimension, &'a Value)>) {
    match v {
        Value::Object(map) => {
            for (k, inner) in map {
                match dimension_of_key(k) {
                    Some(d) if inner.is_object() => out.push((d, inner)),
                    _ => collect_blocks(inner, out),
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|i| collect_blocks(i, out)),
        _ => {}
    }
}

fn field<'a>(block: &'a Value, names: &[&str]) -> Option<&'a Value> {
    let map = block.as_object()?;
    names.iter().find_map(|n| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(n)).map(|(_, v)| v))
}

fn text_field(block: &Value, names: &[&str]) -> String {
    field(block, names).and_then(Value::as_str).unwrap_or_default().trim().to_string()
}

fn parse_correct(dimension: Dimension, answer: &str, options: &[String; 4]) -> Result<Choice, QaError> {
    let ambiguous = || QaError::AmbiguousCorrect { dimension, answer: answer.to_string() };
    if let Some(c) = BARE_LETTER.captures(answer).or_else(|| LABELLED_ANSWER.captures(answer)) {
        return c[1].parse().map_err(|_| ambiguous());
    }
    let norm = normalize_ws_lower(&strip_label(answer));
    let hits: Vec<usize> = (0..4).filter(|&i| normalize_ws_lower(&options[i]) == norm).collect();
    match hits.as_slice() {
        [i] => Ok(Choice::from_index(*i).expect("index < 4")),
        _ => Err(ambiguous()),
    }
}

fn parse_block(dimension: Dimension, block: &Value) -> Result<DraftQuestion, QaError> {
    let options: Vec<String> = match field(block, &["Options", "Choices"]) {
        Some(Value::Array(items)) => items.iter().map(|o| strip_label(o.as_str().unwrap_or_default())).collect(),
        Some(Value::Object(map)) => map.values().map(|o| strip_label(o.as_str().unwrap_or_default())).collect(),
        _ => return Err(QaError::MissingField { dimension, field: "Options" }),
    };
    let options: [String; 4] =
        options.try_into().map_err(|o: Vec<String>| QaError::BadOptionCount { dimension, count: o.len() })?;
    check_distinct(dimension, &options)?;
    let stem = text_field(block, &["Question"]);
    if stem.is_empty() {
        return Err(QaError::MissingField { dimension, field: "Question" });
    }
    let answer = match field(block, &["Correct Answer", "Answer", "Correct"]) {
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => String::new(),
    };
    Ok(DraftQuestion {
        dimension,
        scenario: text_field(block, &["Scenario"]),
        reasoning: text_field(block, &["Reasoning"]),
        stem,
        correct: parse_correct(dimension, &answer, &options)?,
        options,
    })
}

fn parse_json(text: &str) -> Result<Value, QaError> {
    parse_json_lenient(text).ok_or(QaError::UnparseableResponse)
}

/// All four dimension blocks; the first block per dimension wins.
pub fn parse_question_response(text: &str) -> Result<Vec<DraftQuestion>, QaError> {
    let v = parse_json(text)?;
    let mut blocks = Vec::new();
    collect_blocks(&v, &mut blocks);
    Dimension::ALL
        .into_iter()
        .map(|d| {
            let (_, block) = blocks.iter().find(|(bd, _)| *bd == d).ok_or(QaError::MissingDimension(d))?;
            parse_block(d, block)
        })
        .collect()
}

/// A single-dimension response, as produced by a regeneration request.
pub fn parse_single_question(text: &str, dimension: Dimension) -> Result<DraftQuestion, QaError> {
    let v = parse_json(text)?;
    let mut blocks = Vec::new();
    collect_blocks(&v, &mut blocks);
    let (_, block) = blocks.iter().find(|(d, _)| *d == dimension).ok_or(QaError::MissingDimension(dimension))?;
    parse_block(dimension, block)
}

/// Shuffles the draft's options with a generator seeded from
/// `(seed, id, attempt)` and records the permutation.
pub fn finalize(
    draft: DraftQuestion,
    book_id: &str,
    plot_index: u32,
    character: &str,
    attempt: u32,
    seed: u64,
) -> TomQuestion {
    let id = TomQuestion::make_id(book_id, plot_index, character, draft.dimension);
    let digest = sha256_hex(format!("{seed}:{id}:{attempt}"));
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_str_radix(&digest[..16], 16).expect("hex digest"));
    let mut order: [u8; 4] = [0, 1, 2, 3];
    order.shuffle(&mut rng);
    let options = order.map(|i| draft.options[i as usize].clone());
    let correct_pos = order.iter().position(|&i| i as usize == draft.correct.index()).expect("permutation");
    let q = TomQuestion {
        id,
        book_id: book_id.into(),
        plot_index,
        character: character.into(),
        dimension: draft.dimension,
        scenario: draft.scenario,
        reasoning: draft.reasoning,
        stem: draft.stem,
        options,
        correct: Choice::from_index(correct_pos).expect("index < 4"),
        state: QuestionState::Generated,
        attempt,
        permutation: order,
        review_notes: None,
    };
    q.check_invariants().expect("options checked distinct while parsing");
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStage {
    Llm,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub question_id: String,
    pub stage: ReviewStage,
    pub attempt: u32,
    pub pass: bool,
    pub notes: String,
}

pub fn verification_request(
    template: &Template,
    q: &TomQuestion,
    plot: &Plot,
    model_id: &str,
    seed: Option<u64>,
) -> Result<ChatRequest, QaError> {
    let prompt = template.render(&[
        ("dimension", q.dimension.as_str()),
        ("character", &q.character),
        ("plot_summary", &plot.summary),
        ("scenario", if q.scenario.is_empty() { &plot.scenario } else { &q.scenario }),
        ("question", &q.stem),
        ("choices", &q.render_choices()),
        ("correct", &q.correct.to_string()),
    ])?;
    Ok(ChatRequest::user_prompt(model_id, prompt, seed))
}

static VALID_FLAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)"?valid"?\s*:\s*"?(true|false)"?"#).expect("valid regex"));

/// Reads `{"valid": bool, "notes": ...}`; anything unreadable fails the question.
pub fn parse_verdict(text: &str) -> (bool, String) {
    if let Ok(v) = parse_json(text) {
        if let Some(pass) = field(&v, &["valid", "pass"]).and_then(Value::as_bool) {
            return (pass, text_field(&v, &["notes", "reason"]));
        }
    }
    match VALID_FLAG.captures(text) {
        Some(c) => (c[1].eq_ignore_ascii_case("true"), String::new()),
        None => (false, format!("unreadable verifier response: {}", text.trim())),
    }
}

/// Records an LLM verdict: pass moves to LlmVerified, fail to Rejected.
pub fn apply_llm_verdict(q: &mut TomQuestion, response: &str) -> Result<VerificationVerdict, QaError> {
    let (pass, notes) = parse_verdict(response);
    let to = if pass { QuestionState::LlmVerified } else { QuestionState::Rejected };
    if q.state != QuestionState::Generated {
        return Err(QaError::IllegalTransition { id: q.id.clone(), from: q.state, to });
    }
    q.transition(to)?;
    q.review_notes = (!pass).then(|| notes.clone());
    Ok(VerificationVerdict { question_id: q.id.clone(), stage: ReviewStage::Llm, attempt: q.attempt, pass, notes })
}

pub fn llm_verify(
    gate: &Gateway,
    template: &Template,
    q: &mut TomQuestion,
    plot: &Plot,
    model_id: &str,
    seed: Option<u64>,
) -> Result<VerificationVerdict, QaError> {
    if q.state != QuestionState::Generated {
        return Err(QaError::IllegalTransition { id: q.id.clone(), from: q.state, to: QuestionState::LlmVerified });
    }
    let req = verification_request(template, q, plot, model_id, seed)?;
    let resp = gate.complete_cached(&req)?;
    apply_llm_verdict(q, &resp.text)
}

pub fn regeneration_request(
    templates: (&Template, &Template),
    q: &TomQuestion,
    plot: &Plot,
    triples: &[MentalStateTriple],
    max_attempts: u32,
    model_id: &str,
    seed: Option<u64>,
) -> Result<ChatRequest, QaError> {
    let (question_tpl, regen_tpl) = templates;
    if q.state != QuestionState::Rejected {
        return Err(QaError::IllegalTransition { id: q.id.clone(), from: q.state, to: QuestionState::Generated });
    }
    if q.attempt >= max_attempts {
        return Err(QaError::AttemptsExhausted { id: q.id.clone(), attempts: q.attempt, max: max_attempts });
    }
    let base = question_prompt_text(question_tpl, plot, &q.character, triples)?;
    let prompt = regen_tpl.render(&[
        ("base_prompt", &base),
        ("dimension", q.dimension.as_str()),
        ("character", &q.character),
        ("question", &q.stem),
        ("choices", &q.render_choices()),
        ("notes", q.review_notes.as_deref().unwrap_or("")),
    ])?;
    Ok(ChatRequest::user_prompt(model_id, prompt, seed))
}

/// Replaces a rejected question with the regenerated one; the attempt
/// counter advances and the question re-enters verification.
pub fn apply_regeneration(q: &mut TomQuestion, response: &str, seed: u64) -> Result<(), QaError> {
    let draft = parse_single_question(response, q.dimension)?;
    let mut next = q.clone();
    next.transition(QuestionState::Generated)?;
    let fresh = finalize(draft, &q.book_id, q.plot_index, &q.character, next.attempt, seed);
    *q = fresh;
    Ok(())
}

pub const REVIEW_HEADER: [&str; 13] = [
    "id", "book_id", "plot_index", "character", "dimension", "stem", "option_a", "option_b", "option_c", "option_d",
    "correct", "verdict", "notes",
];

/// LlmVerified questions as review CSV rows, sampled at `rate` with a seeded
/// generator. Rows follow the input order.
pub fn export_review(questions: &[TomQuestion], rate: f64, seed: u64) -> Result<String, QaError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REVIEW_HEADER)?;
    for q in sample(questions.iter().filter(|q| q.state == QuestionState::LlmVerified), rate, seed, |q| &q.id) {
        let plot = q.plot_index.to_string();
        let correct = q.correct.to_string();
        let mut row = vec![q.id.as_str(), &q.book_id, &plot, &q.character, q.dimension.as_str(), &q.stem];
        row.extend(q.options.iter().map(String::as_str));
        row.extend([correct.as_str(), "", ""]);
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv of utf-8 fields"))
}

/// Deterministic Bernoulli sample: an item is kept when a hash of
/// `(seed, key)` falls under `rate`.
pub fn sample<'a, T: 'a>(
    items: impl IntoIterator<Item = &'a T>,
    rate: f64,
    seed: u64,
    key: impl Fn(&T) -> &str,
) -> Vec<&'a T> {
    items
        .into_iter()
        .filter(|t| {
            let h = sha256_hex(format!("{seed}:{}", key(t)));
            let x = u64::from_str_radix(&h[..16], 16).expect("hex digest") as f64 / u64::MAX as f64;
            x < rate
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct ImportReport {
    pub applied: Vec<VerificationVerdict>,
    pub skipped_blank: usize,
    pub errors: Vec<QaError>,
}

/// Applies filled-in review rows. Bad rows are reported and skipped; the
/// rest still apply.
pub fn import_review(csv_text: &str, questions: &mut [TomQuestion]) -> Result<ImportReport, QaError> {
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, q) in questions.iter().enumerate() {
        by_id.insert(q.id.clone(), i);
    }
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(csv_text.as_bytes());
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (Some(id_col), Some(verdict_col)) = (col("id"), col("verdict")) else {
        return Err(QaError::MalformedVerdictRow { row: 1, reason: "header lacks id or verdict column".into() });
    };
    let notes_col = col("notes");
    let mut report = ImportReport::default();
    for (n, rec) in r.records().enumerate() {
        let row = n + 2;
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                report.errors.push(QaError::MalformedVerdictRow { row, reason: e.to_string() });
                continue;
            }
        };
        let (Some(id), Some(verdict)) = (rec.get(id_col), rec.get(verdict_col)) else {
            report.errors.push(QaError::MalformedVerdictRow { row, reason: "missing columns".into() });
            continue;
        };
        let pass = match verdict.trim().to_lowercase().as_str() {
            "" => {
                report.skipped_blank += 1;
                continue;
            }
            "pass" | "yes" | "y" | "1" | "true" => true,
            "fail" | "no" | "n" | "0" | "false" => false,
            other => {
                report.errors.push(QaError::MalformedVerdictRow { row, reason: format!("verdict `{other}`") });
                continue;
            }
        };
        let Some(&qi) = by_id.get(id.trim()) else {
            report.errors.push(QaError::UnknownQuestionId(id.trim().to_string()));
            continue;
        };
        let q = &mut questions[qi];
        let to = if pass { QuestionState::HumanVerified } else { QuestionState::Rejected };
        if let Err(e) = q.transition(to) {
            report.errors.push(e);
            continue;
        }
        let notes = notes_col.and_then(|c| rec.get(c)).unwrap_or("").trim().to_string();
        q.review_notes = (!pass).then(|| notes.clone());
        report.applied.push(VerificationVerdict {
            question_id: q.id.clone(),
            stage: ReviewStage::Human,
            attempt: q.attempt,
            pass,
            notes,
        });
    }
    Ok(report)
}

/// Share of questions whose first LLM review, on attempt 1, passed.
pub fn first_pass_rate(verdicts: &[VerificationVerdict]) -> (u64, u64) {
    let mut first: BTreeMap<&str, bool> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.stage == ReviewStage::Llm && v.attempt == 1) {
        first.entry(&v.question_id).or_insert(v.pass);
    }
    (first.values().filter(|p| **p).count() as u64, first.len() as u64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub questions: u64,
    pub correct_answers: u64,
    pub distractors: u64,
    pub per_dimension: BTreeMap<Dimension, u64>,
    pub per_book: BTreeMap<String, u64>,
}

pub fn dataset_stats<'a>(questions: impl IntoIterator<Item = &'a TomQuestion>) -> DatasetStats {
    let mut s = DatasetStats::default();
    for q in questions {
        s.questions += 1;
        s.correct_answers += 1;
        s.distractors += q.distractors().count() as u64;
        *s.per_dimension.entry(q.dimension).or_default() += 1;
        *s.per_book.entry(q.book_id.clone()).or_default() += 1;
    }
    s
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let mut out = format!(
            "Questions\t{}\nCorrect Answers\t{}\nDistractor Answers\t{}\n",
            self.questions, self.correct_answers, self.distractors
        );
        for (d, n) in &self.per_dimension {
            out.push_str(&format!("{d}\t{n}\n"));
        }
        for (b, n) in &self.per_book {
            out.push_str(&format!("book:{b}\t{n}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn response(skip: Option<&str>) -> String {
        let block = |d: &str, correct: &str| {
            format!(
                r#"{{"{d} Multiple Choice Question": {{"Scenario": "The hall.", "Reasoning": "r", "Question": "What about {d}?", "Options": ["A. {d} one", "B. {d} two", "C. {d} three", "D. {d} four"], "Correct Answer": "{correct}"}}}}"#
            )
        };
        let blocks: Vec<String> = [("Belief", "B"), ("Emotion", "A."), ("Intention", "C. Intention three"), ("Desire", "d")]
            .iter()
            .filter(|(d, _)| Some(*d) != skip)
            .map(|(d, c)| block(d, c))
            .collect();
        format!("```json\n{{\"Target Character\": [{}]}}\n```", blocks.join(","))
    }

    #[test]
    fn parses_all_four_blocks() {
        let drafts = parse_question_response(&response(None)).unwrap();
        let dims: Vec<_> = drafts.iter().map(|d| d.dimension).collect();
        assert_eq!(dims, Dimension::ALL.to_vec());
        let correct: Vec<_> = drafts.iter().map(|d| d.correct).collect();
        assert_eq!(correct, vec![Choice::B, Choice::D, Choice::A, Choice::C]);
        assert_eq!(drafts[0].options[1], "Belief two");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_question_response(&response(Some("Emotion"))), Err(QaError::MissingDimension(Dimension::Emotion))));
        let five = response(None).replacen(r#""D. Belief four"]"#, r#""D. Belief four", "E. extra"]"#, 1);
        assert!(matches!(parse_question_response(&five), Err(QaError::BadOptionCount { count: 5, .. })));
        let multi = response(None).replacen(r#""Correct Answer": "B""#, r#""Correct Answer": "B, C""#, 1);
        assert!(matches!(parse_question_response(&multi), Err(QaError::AmbiguousCorrect { .. })));
        let none = response(None).replacen(r#""Correct Answer": "B""#, r#""Correct Answer": """#, 1);
        assert!(matches!(parse_question_response(&none), Err(QaError::AmbiguousCorrect { .. })));
    }

    #[test]
    fn shuffle_keeps_correct_text() {
        for draft in parse_question_response(&response(None)).unwrap() {
            let right = draft.options[draft.correct.index()].clone();
            let q = finalize(draft.clone(), "king-lear", 1, "King Lear", 1, 42);
            assert_eq!(q.options[q.correct.index()], right);
            for (i, &src) in q.permutation.iter().enumerate() {
                assert_eq!(q.options[i], draft.options[src as usize]);
            }
            assert_eq!(q, finalize(draft, "king-lear", 1, "King Lear", 1, 42));
            assert_eq!(q.distractors().count(), 3);
        }
        let q = finalize(parse_question_response(&response(None)).unwrap().remove(0), "king-lear", 3, "King Lear", 1, 0);
        assert_eq!(q.id, "king-lear-p03-king_lear-belief");
    }

    fn question() -> TomQuestion {
        finalize(parse_question_response(&response(None)).unwrap().remove(0), "b", 1, "Lear", 1, 7)
    }

    #[test]
    fn llm_verdicts_drive_state() {
        let mut q = question();
        let v = apply_llm_verdict(&mut q, r#"{"valid": true, "notes": "fine"}"#).unwrap();
        assert!(v.pass);
        assert_eq!(q.state, QuestionState::LlmVerified);
        assert!(matches!(apply_llm_verdict(&mut q, r#"{"valid": true}"#), Err(QaError::IllegalTransition { .. })));

        let mut q = question();
        apply_llm_verdict(&mut q, r#"{"valid": false, "notes": "two answers fit"}"#).unwrap();
        assert_eq!((q.state, q.attempt), (QuestionState::Rejected, 1));
        assert_eq!(q.review_notes.as_deref(), Some("two answers fit"));
        assert!(!parse_verdict("no idea").0);
    }

    #[test]
    fn regeneration_bumps_attempt() {
        let mut q = question();
        apply_llm_verdict(&mut q, r#"{"valid": false, "notes": "weak"}"#).unwrap();
        let single = r#"{"Belief Multiple Choice Question": {"Scenario": "s", "Reasoning": "r", "Question": "Better?", "Options": ["A.w", "B.x", "C.y", "D.z"], "Correct Answer": "A"}}"#;
        apply_regeneration(&mut q, single, 7).unwrap();
        assert_eq!((q.state, q.attempt, q.stem.as_str()), (QuestionState::Generated, 2, "Better?"));
        apply_llm_verdict(&mut q, r#"{"valid": true}"#).unwrap();
        assert_eq!(q.state, QuestionState::LlmVerified);
    }

    #[test]
    fn review_round_trip() {
        let mut qs: Vec<TomQuestion> = parse_question_response(&response(None))
            .unwrap()
            .into_iter()
            .map(|d| finalize(d, "b", 1, "Lear", 1, 1))
            .collect();
        for q in &mut qs {
            q.transition(QuestionState::LlmVerified).unwrap();
        }
        let csv_text = export_review(&qs, 1.0, 0).unwrap();
        assert_eq!(csv_text.lines().count(), 5);
        assert!(csv_text.starts_with("id,book_id,plot_index,character,dimension,stem,option_a"));
        let before = qs.clone();
        let filled: String = csv_text
            .lines()
            .enumerate()
            .map(|(i, l)| if i == 0 { format!("{l}\n") } else { format!("{}pass,\n", &l[..l.len() - 1]) })
            .collect();
        let filled = format!("{filled}ghost,b,1,Lear,Belief,s,a,b,c,d,A,pass,\n");
        let report = import_review(&filled, &mut qs).unwrap();
        assert_eq!(report.applied.len(), 4);
        assert!(matches!(report.errors.as_slice(), [QaError::UnknownQuestionId(id)] if id == "ghost"));
        for (a, b) in qs.iter().zip(&before) {
            assert_eq!(a.state, QuestionState::HumanVerified);
            assert_eq!((&a.stem, &a.options, a.correct), (&b.stem, &b.options, b.correct));
        }
    }

    #[test]
    fn stats_count_distractors() {
        assert_eq!(dataset_stats(&[]).distractors, 0);
        let s = dataset_stats(&[question()]);
        assert_eq!((s.questions, s.distractors), (1, 3));
    }

    #[test]
    fn first_pass_bookkeeping() {
        let v = |id: &str, attempt, pass| VerificationVerdict {
            question_id: id.into(),
            stage: ReviewStage::Llm,
            attempt,
            pass,
            notes: String::new(),
        };
        let verdicts: Vec<_> = (0..10).map(|i| v(&format!("q{i}"), 1, i != 0)).chain([v("q0", 2, true)]).collect();
        assert_eq!(first_pass_rate(&verdicts), (9, 10));
    }
}
