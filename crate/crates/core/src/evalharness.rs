//! Evaluation: prompt assembly for the four conditions, answer parsing,
//! exact scoring and table rendering.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use crate::corpus::{Book, Corpus};
use crate::llmgate::{estimate_tokens, ChatRequest, Gateway};
use crate::qagen::{Choice, TomQuestion};
use crate::templates::{Template, TemplateError, TemplateSet};
use crate::tkg::{KgError, TemporalKg};
use crate::triples::Dimension;
use crate::util::format_ratio_2dp;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("book `{0}` is not in the corpus")]
    UnknownBook(String),
    #[error("book `{book}` has no plot {plot}")]
    MissingPlot { book: String, plot: u32 },
    #[error("no knowledge graph loaded for book `{0}`")]
    MissingKg(String),
    #[error("prediction for unknown question `{0}`")]
    UnknownQuestionId(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    CurrentPlot,
    CurrentPlusPrevSummaries,
}

impl ContextMode {
    pub fn label(self) -> &'static str {
        match self {
            ContextMode::CurrentPlot => "current",
            ContextMode::CurrentPlusPrevSummaries => "extended",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvalCondition {
    pub context: ContextMode,
    pub triples: bool,
}

impl EvalCondition {
    /// The 2x2 grid, base condition before its triple variant.
    pub fn grid() -> Vec<EvalCondition> {
        [ContextMode::CurrentPlot, ContextMode::CurrentPlusPrevSummaries]
            .into_iter()
            .flat_map(|context| [false, true].map(|triples| EvalCondition { context, triples }))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.context.label(), if self.triples { "+triples" } else { "" })
    }
}

impl fmt::Display for EvalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EvalCondition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ctx, triples) = match s.strip_suffix("+triples") {
            Some(c) => (c, true),
            None => (s, false),
        };
        let context = match ctx {
            "current" => ContextMode::CurrentPlot,
            "extended" => ContextMode::CurrentPlusPrevSummaries,
            other => return Err(format!("unknown context `{other}`")),
        };
        Ok(EvalCondition { context, triples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Ask for the triple list, then the answer object.
    #[default]
    Appendix,
    AnswerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContextOptions {
    pub variant: PromptVariant,
    /// Under the extended context, keep only this many preceding summaries.
    pub window: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub question_id: String,
    pub condition: EvalCondition,
    pub text: String,
    pub token_estimate: u64,
}

/// Triple lines under their heading, framed by blank lines; empty when off.
pub fn triples_block(lines: &[String]) -> String {
    let mut out = String::from("\nRelevant mental state triples:\n");
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

pub fn assemble_context(
    templates: &TemplateSet,
    question: &TomQuestion,
    book: &Book,
    kg: Option<&TemporalKg>,
    condition: EvalCondition,
    opts: ContextOptions,
) -> Result<EvalPrompt, EvalError> {
    let t = question.plot_index;
    let plot = book.plot(t).ok_or_else(|| EvalError::MissingPlot { book: book.id.clone(), plot: t })?;
    let mut summaries: Vec<&str> = Vec::new();
    if condition.context == ContextMode::CurrentPlusPrevSummaries {
        let first = opts.window.map_or(1, |w| t.saturating_sub(w).max(1));
        for i in first..t {
            let prev = book.plot(i).ok_or_else(|| EvalError::MissingPlot { book: book.id.clone(), plot: i })?;
            summaries.push(&prev.summary);
        }
    }
    summaries.push(&plot.summary);
    let block = if condition.triples {
        let kg = kg.ok_or_else(|| EvalError::MissingKg(book.id.clone()))?;
        let lines: Vec<String> = match kg.state_at(&question.character, t) {
            Ok(ts) => ts.iter().map(|x| x.render()).collect(),
            Err(KgError::UnknownCharacter(_)) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        triples_block(&lines)
    } else {
        String::new()
    };
    let scenario = if question.scenario.is_empty() { &plot.scenario } else { &question.scenario };
    let template: &Template = match opts.variant {
        PromptVariant::Appendix => &templates.eval_appendix,
        PromptVariant::AnswerOnly => &templates.eval_answer_only,
    };
    let text = template.render(&[
        ("character", &question.character),
        ("book_title", &book.title),
        ("plot", &summaries.join("\n\n")),
        ("scenario", scenario),
        ("question", &question.stem),
        ("choices", &question.render_choices()),
        ("triples_block", &block),
    ])?;
    Ok(EvalPrompt { question_id: question.id.clone(), condition, token_estimate: estimate_tokens(&text), text })
}

static ANSWER_OBJECT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)\{\s*["']?answer["']?\s*\\?:\s*["']?\s*([a-d])\s*["']?\s*\}"#).expect("valid regex")
});
static LETTER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[*_\s(\[]*([A-D])[*_\s).\]]*$").expect("valid regex"));

/// The first `{answer: X}` object wins; otherwise a lone option letter on its
/// own line, provided no other letter stands alone.
pub fn parse_answer(text: &str) -> Option<Choice> {
    if let Some(c) = ANSWER_OBJECT.captures(text) {
        return c[1].parse().ok();
    }
    let mut found: Vec<Choice> = text
        .lines()
        .filter_map(|l| LETTER_LINE.captures(l).and_then(|c| c[1].parse().ok()))
        .collect();
    found.dedup();
    match found.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub model_id: String,
    pub condition: EvalCondition,
    /// `None` when the response was unparseable or the call failed.
    pub letter: Option<Choice>,
    pub raw_text: String,
    pub prompt_tokens_est: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock time of the call; kept out of files so reruns stay identical.
    #[serde(skip)]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }

    /// Percentage with two decimals, half-up; `-` when empty.
    pub fn display(&self) -> String {
        if self.total == 0 {
            "-".into()
        } else {
            format_ratio_2dp(100 * self.correct, self.total)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model_id: String,
    pub condition: EvalCondition,
    pub cells: BTreeMap<Dimension, Tally>,
    pub unparseable: u64,
}

impl ScoreRow {
    /// Weighted by question count per dimension.
    pub fn average(&self) -> Tally {
        let mut t = Tally::default();
        self.cells.values().for_each(|c| t.add(*c));
        t
    }

    pub fn cell(&self, d: Dimension) -> Tally {
        self.cells.get(&d).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTable {
    /// Ordered by model first appearance, then condition.
    pub rows: Vec<ScoreRow>,
}

/// Answer key entry for one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyEntry {
    pub dimension: Dimension,
    pub correct: Choice,
}

pub fn answer_key<'a>(questions: impl IntoIterator<Item = &'a TomQuestion>) -> HashMap<String, KeyEntry> {
    questions.into_iter().map(|q| (q.id.clone(), KeyEntry { dimension: q.dimension, correct: q.correct })).collect()
}

/// Unparseable predictions count against accuracy.
pub fn score(predictions: &[Prediction], key: &HashMap<String, KeyEntry>) -> Result<ScoreTable, EvalError> {
    let mut models: Vec<&str> = Vec::new();
    let mut rows: BTreeMap<(usize, EvalCondition), ScoreRow> = BTreeMap::new();
    for p in predictions {
        let k = key.get(&p.question_id).ok_or_else(|| EvalError::UnknownQuestionId(p.question_id.clone()))?;
        let m = models.iter().position(|m| *m == p.model_id).unwrap_or_else(|| {
            models.push(&p.model_id);
            models.len() - 1
        });
        let row = rows.entry((m, p.condition)).or_insert_with(|| ScoreRow {
            model_id: p.model_id.clone(),
            condition: p.condition,
            cells: BTreeMap::new(),
            unparseable: 0,
        });
        let cell = row.cells.entry(k.dimension).or_default();
        cell.total += 1;
        match p.letter {
            Some(l) if l == k.correct => cell.correct += 1,
            Some(_) => {}
            None => row.unparseable += 1,
        }
    }
    Ok(ScoreTable { rows: rows.into_values().collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLayout {
    #[default]
    Plain,
    Markdown,
    Csv,
}

impl FromStr for ReportLayout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "plain" | "text" => Ok(ReportLayout::Plain),
            "markdown" | "md" => Ok(ReportLayout::Markdown),
            "csv" => Ok(ReportLayout::Csv),
            other => Err(format!("unknown layout `{other}`")),
        }
    }
}

const COLUMNS: [&str; 6] = ["Model", "Belief", "Desire", "Emotion", "Intention", "Avg"];

fn row_cells(row: &ScoreRow) -> Vec<String> {
    let label = if row.condition.triples { "w Triple".to_string() } else { row.model_id.clone() };
    let mut cells = vec![label];
    cells.extend(Dimension::ALL.iter().map(|d| row.cell(*d).display()));
    cells.push(row.average().display());
    cells
}

fn context_heading(c: ContextMode) -> &'static str {
    match c {
        ContextMode::CurrentPlot => "Context: current plot",
        ContextMode::CurrentPlusPrevSummaries => "Context: current plot + previous summaries",
    }
}

/// Rows grouped by context, each model's base row followed by its
/// "w Triple" row.
fn grouped(table: &ScoreTable) -> Vec<(ContextMode, Vec<&ScoreRow>)> {
    let mut groups: Vec<(ContextMode, Vec<&ScoreRow>)> = Vec::new();
    let mut contexts: Vec<ContextMode> = table.rows.iter().map(|r| r.condition.context).collect();
    contexts.sort();
    contexts.dedup();
    for c in contexts {
        let rows = table.rows.iter().filter(|r| r.condition.context == c).collect();
        groups.push((c, rows));
    }
    groups
}

pub fn render_report(table: &ScoreTable, layout: ReportLayout) -> String {
    match layout {
        ReportLayout::Plain => {
            let mut out = String::new();
            for (i, (ctx, rows)) in grouped(table).into_iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                let lines: Vec<Vec<String>> = std::iter::once(COLUMNS.map(String::from).to_vec())
                    .chain(rows.iter().map(|r| row_cells(r)))
                    .collect();
                let width = lines.iter().map(|l| l[0].chars().count()).max().unwrap_or(0);
                out.push_str(context_heading(ctx));
                out.push('\n');
                for l in lines {
                    let mut line = format!("{:<width$}", l[0]);
                    for (c, head) in l[1..].iter().zip(&COLUMNS[1..]) {
                        line.push_str(&format!("  {:>w$}", c, w = head.len().max(6)));
                    }
                    out.push_str(line.trim_end());
                    out.push('\n');
                }
            }
            out
        }
        ReportLayout::Markdown => {
            let mut out = String::new();
            for (i, (ctx, rows)) in grouped(table).into_iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&format!("**{}**\n\n", context_heading(ctx)));
                out.push_str(&format!("| {} |\n", COLUMNS.join(" | ")));
                out.push_str(&format!("|{}\n", "---|".repeat(COLUMNS.len())));
                for r in rows {
                    out.push_str(&format!("| {} |\n", row_cells(r).join(" | ")));
                }
            }
            out
        }
        ReportLayout::Csv => {
            let mut out = String::from("model,context,triples,belief,desire,emotion,intention,avg,questions,unparseable\n");
            for r in &table.rows {
                let cells = row_cells(r);
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    csv_field(&r.model_id),
                    r.condition.context.label(),
                    if r.condition.triples { "on" } else { "off" },
                    cells[1..].join(","),
                    r.average().total,
                    r.unparseable
                ));
            }
            out
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub struct EvalInputs<'a> {
    pub templates: &'a TemplateSet,
    pub corpus: &'a Corpus,
    pub kgs: &'a BTreeMap<String, TemporalKg>,
    pub questions: &'a [TomQuestion],
    pub models: &'a [String],
    pub conditions: &'a [EvalCondition],
    pub options: ContextOptions,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalRun {
    pub prompts: Vec<EvalPrompt>,
    pub predictions: Vec<Prediction>,
    pub table: ScoreTable,
}

/// Builds every prompt, runs them through the gateway and scores the
/// answers. Items iterate by (book, plot, question id, model, condition);
/// failed calls become unparseable predictions carrying the error.
pub fn run_eval(gate: &Gateway, inputs: &EvalInputs<'_>) -> Result<EvalRun, EvalError> {
    let mut questions: Vec<&TomQuestion> = inputs.questions.iter().collect();
    questions.sort_by(|a, b| (&a.book_id, a.plot_index, &a.id).cmp(&(&b.book_id, b.plot_index, &b.id)));
    let mut prompts = Vec::new();
    let mut items = Vec::new();
    for q in &questions {
        let book = inputs.corpus.book(&q.book_id).ok_or_else(|| EvalError::UnknownBook(q.book_id.clone()))?;
        for model in inputs.models {
            for &cond in inputs.conditions {
                let kg = inputs.kgs.get(&q.book_id);
                let prompt = assemble_context(inputs.templates, q, book, kg, cond, inputs.options)?;
                let req = ChatRequest::user_prompt(model.clone(), prompt.text.clone(), inputs.seed);
                items.push(((q.id.clone(), model.clone(), cond, prompt.token_estimate), req));
                prompts.push(prompt);
            }
        }
    }
    let predictions: Vec<Prediction> = gate
        .execute_batch_timed(&items)
        .into_iter()
        .map(|((question_id, model_id, condition, tokens), result, latency)| {
            let (raw_text, error) = match result {
                Ok(r) => (r.text, None),
                Err(e) => {
                    log::warn!("{question_id} / {model_id} / {condition}: {e}");
                    (String::new(), Some(e.to_string()))
                }
            };
            Prediction {
                letter: parse_answer(&raw_text),
                question_id,
                model_id,
                condition,
                raw_text,
                prompt_tokens_est: tokens,
                error,
                latency_ms: Some(latency.as_millis() as u64),
            }
        })
        .collect();
    let key = answer_key(inputs.questions.iter());
    let table = score(&predictions, &key)?;
    Ok(EvalRun { prompts, predictions, table })
}

/// Mean prompt token estimate per context mode, over base-condition prompts.
pub fn mean_prompt_tokens(prompts: &[EvalPrompt]) -> BTreeMap<ContextMode, (u64, u64)> {
    let mut out: BTreeMap<ContextMode, (u64, u64)> = BTreeMap::new();
    for p in prompts.iter().filter(|p| !p.condition.triples) {
        let e = out.entry(p.condition.context).or_default();
        e.0 += p.token_estimate;
        e.1 += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_answer("Answer:\n{answer: B}"), Some(Choice::B));
        assert_eq!(parse_answer("The answer is {\"answer\": \"C\"}"), Some(Choice::C));
        assert_eq!(parse_answer("{ ANSWER : 'd' } then {answer: A}"), Some(Choice::D));
        assert_eq!(parse_answer("Both B and D seem right"), None);
        assert_eq!(parse_answer("Thinking...\n**C**\n"), Some(Choice::C));
        assert_eq!(parse_answer("A\nB"), None);
        assert_eq!(parse_answer(""), None);
    }

    #[test]
    fn condition_labels_round_trip() {
        for c in EvalCondition::grid() {
            assert_eq!(c.label().parse::<EvalCondition>().unwrap(), c);
        }
        assert_eq!(EvalCondition::grid().len(), 4);
    }

    fn pred(id: &str, cond: EvalCondition, letter: Option<Choice>) -> Prediction {
        Prediction {
            question_id: id.into(),
            model_id: "m".into(),
            condition: cond,
            letter,
            raw_text: String::new(),
            prompt_tokens_est: 0,
            error: None,
            latency_ms: None,
        }
    }

    #[test]
    fn seven_of_ten() {
        let cond = EvalCondition { context: ContextMode::CurrentPlot, triples: false };
        let key: HashMap<String, KeyEntry> =
            (0..10).map(|i| (format!("q{i}"), KeyEntry { dimension: Dimension::Belief, correct: Choice::A })).collect();
        let preds: Vec<_> = (0..10)
            .map(|i| pred(&format!("q{i}"), cond, if i < 7 { Some(Choice::A) } else if i < 9 { Some(Choice::B) } else { None }))
            .collect();
        let t = score(&preds, &key).unwrap();
        assert_eq!(t.rows[0].cell(Dimension::Belief).display(), "70.00");
        assert_eq!(t.rows[0].unparseable, 1);
        assert_eq!(t.rows[0].average().display(), "70.00");
        assert!(matches!(score(&[pred("zz", cond, None)], &key), Err(EvalError::UnknownQuestionId(_))));
    }

    #[test]
    fn layouts() {
        let mut cells = BTreeMap::new();
        cells.insert(Dimension::Belief, Tally { correct: 1, total: 3 });
        let row = ScoreRow {
            model_id: "m".into(),
            condition: EvalCondition { context: ContextMode::CurrentPlot, triples: false },
            cells,
            unparseable: 0,
        };
        let table = ScoreTable { rows: vec![row] };
        let plain = render_report(&table, ReportLayout::Plain);
        assert_eq!(plain.lines().count(), 3);
        assert_eq!(plain.lines().nth(2).unwrap().split_whitespace().collect::<Vec<_>>(), ["m", "33.33", "-", "-", "-", "33.33"]);
        let csv = render_report(&table, ReportLayout::Csv);
        assert_eq!(csv.lines().nth(1).unwrap(), "m,current,off,33.33,-,-,-,33.33,3,0");
        assert!(render_report(&table, ReportLayout::Markdown).contains("| m | 33.33 | - | - | - | 33.33 |"));
    }
}
