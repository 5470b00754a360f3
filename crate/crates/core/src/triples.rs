//! Mental-state triples: schema, extraction prompts, response parsing,
//! dimension classification and perspective checks.

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use crate::corpus::{CharacterRegistry, Plot};
use crate::llmgate::ChatRequest;
use crate::templates::{Template, TemplateError};
use crate::util::{collapse_double_braces, parse_json_lenient, sha256_hex, strip_code_fence};

#[derive(Debug, thiserror::Error)]
pub enum TripleError {
    #[error("{character} does not speak in plot {plot}")]
    CharacterAbsent { character: String, plot: u32 },
    #[error("no triple structure found in response")]
    UnparseableResponse,
    #[error("malformed triple entry `{entry}`: {reason}")]
    MalformedTriple { entry: String, reason: String },
    #[error("predicate `{0}` has no Believes/Desires/Feels/Intends stem")]
    UnknownPredicate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Declaration order is the report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Belief,
    Desire,
    Emotion,
    Intention,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::Belief, Dimension::Desire, Dimension::Emotion, Dimension::Intention];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Belief => "Belief",
            Dimension::Desire => "Desire",
            Dimension::Emotion => "Emotion",
            Dimension::Intention => "Intention",
        }
    }

    /// Predicate stem that marks this dimension.
    pub fn stem(self) -> &'static str {
        match self {
            Dimension::Belief => "Believes",
            Dimension::Desire => "Desires",
            Dimension::Emotion => "Feels",
            Dimension::Intention => "Intends",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown dimension `{s}`"))
    }
}

/// Longest case-insensitive stem prefix of `predicate`.
pub fn classify_dimension(predicate: &str) -> Result<Dimension, TripleError> {
    let p = predicate.trim();
    Dimension::ALL
        .into_iter()
        .filter(|d| {
            let stem = d.stem();
            p.len() >= stem.len() && p.is_char_boundary(stem.len()) && p[..stem.len()].eq_ignore_ascii_case(stem)
        })
        .max_by_key(|d| d.stem().len())
        .ok_or_else(|| TripleError::UnknownPredicate(predicate.to_string()))
}

/// Particles after which any capitalized run names the target.
const STRONG_PARTICLES: &[&str] = &["about", "towards", "toward", "regarding", "against"];
/// Particles that also introduce verbs or abstract nouns; the run only counts
/// when the object mentions it.
const WEAK_PARTICLES: &[&str] = &["to", "for", "with", "of"];

/// Splits on whitespace, `_`, `-` and CamelCase boundaries.
fn predicate_words(predicate: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in predicate.split(|c: char| c.is_whitespace() || c == '_' || c == '-') {
        let chars: Vec<char> = chunk.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let boundary = i > 0
                && c.is_uppercase()
                && (chars[i - 1].is_lowercase()
                    || (chars[i - 1].is_uppercase() && chars.get(i + 1).is_some_and(|n| n.is_lowercase())));
            if boundary && !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            cur.push(c);
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

fn strip_possessive(word: &str) -> (&str, bool) {
    for suffix in ["'s", "’s", "'", "’"] {
        if let Some(w) = word.strip_suffix(suffix) {
            return (w, true);
        }
    }
    (word, false)
}

fn mentions_whole_word(haystack: &str, needle: &str) -> bool {
    haystack.match_indices(needle).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Named target encoded in the predicate after stem and particle, if any.
pub fn extract_target(predicate: &str, object: &str) -> Option<String> {
    let words = predicate_words(predicate);
    let dim = classify_dimension(predicate).ok()?;
    if !words.first()?.eq_ignore_ascii_case(dim.stem()) {
        return None;
    }
    let particle = words.get(1)?.to_lowercase();
    let weak = WEAK_PARTICLES.contains(&particle.as_str());
    if !weak && !STRONG_PARTICLES.contains(&particle.as_str()) {
        return None;
    }
    let mut name = Vec::new();
    for w in &words[2..] {
        if !w.chars().next().is_some_and(char::is_uppercase) {
            break;
        }
        let (bare, possessive) = strip_possessive(w);
        name.push(bare.to_string());
        if possessive {
            break;
        }
    }
    let target = name.join(" ");
    if target.is_empty() || (weak && !mentions_whole_word(object, &target)) {
        return None;
    }
    Some(target)
}

/// A parsed `(S, P, O)` entry before classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl RawTriple {
    pub fn render(&self) -> String {
        format!("({}, {}, {})", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    /// Key of the triple list in the response object, when there was one.
    pub key: Option<String>,
    pub entries: Vec<RawTriple>,
    pub malformed: Vec<MalformedEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedEntry {
    pub entry: String,
    pub reason: String,
}

impl From<TripleError> for MalformedEntry {
    fn from(e: TripleError) -> Self {
        match e {
            TripleError::MalformedTriple { entry, reason } => Self { entry, reason },
            other => Self { entry: String::new(), reason: other.to_string() },
        }
    }
}

/// Splits `s` on commas outside brackets and quotes.
fn top_level_commas(s: &str) -> Vec<usize> {
    let mut depth = 0i32;
    let mut quoted = false;
    let mut out = Vec::new();
    for (i, c) in s.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '(' | '[' | '{' if !quoted => depth += 1,
            ')' | ']' | '}' if !quoted => depth -= 1,
            ',' if depth == 0 && !quoted => out.push(i),
            _ => {}
        }
    }
    out
}

/// Parses one `(S, P, O)` entry; commas past the second separator stay in O.
pub fn parse_triple_entry(entry: &str) -> Result<RawTriple, TripleError> {
    let malformed = |reason: &str| TripleError::MalformedTriple { entry: entry.to_string(), reason: reason.to_string() };
    let mut s = entry.trim();
    s = s.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(s).trim();
    if let Some(inner) = s.strip_prefix('(').and_then(|x| x.strip_suffix(')')) {
        s = inner;
    }
    let commas = top_level_commas(s);
    if commas.len() < 2 {
        return Err(malformed("needs subject, predicate and object"));
    }
    let subject = s[..commas[0]].trim();
    let predicate = s[commas[0] + 1..commas[1]].trim();
    let object = s[commas[1] + 1..].trim();
    if subject.is_empty() || predicate.is_empty() || object.is_empty() {
        return Err(malformed("empty field"));
    }
    Ok(RawTriple { subject: subject.into(), predicate: predicate.into(), object: object.into() })
}

fn entries_from_json(v: &Value, out: &mut ParsedResponse) -> bool {
    let list = match v {
        Value::Array(a) => a,
        Value::Object(map) => {
            let pick = map
                .get_key_value("Target Character")
                .filter(|(_, v)| v.is_array())
                .or_else(|| map.iter().find(|(_, v)| v.is_array()));
            match pick {
                Some((k, Value::Array(a))) => {
                    out.key = Some(k.clone());
                    a
                }
                _ => return false,
            }
        }
        _ => return false,
    };
    for item in list {
        let parsed = match item {
            Value::String(s) => parse_triple_entry(s),
            Value::Array(parts) if parts.len() == 3 && parts.iter().all(Value::is_string) => {
                let p: Vec<&str> = parts.iter().filter_map(Value::as_str).collect();
                parse_triple_entry(&format!("({}, {}, {})", p[0], p[1], p[2]))
            }
            other => Err(TripleError::MalformedTriple { entry: other.to_string(), reason: "not a triple string".into() }),
        };
        match parsed {
            Ok(t) => out.entries.push(t),
            Err(e) => out.malformed.push(e.into()),
        }
    }
    true
}

static KEY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""([^"]+)"\s*:"#).expect("valid regex"));

/// Top-level parenthesized spans, nested parentheses included.
fn paren_spans(s: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            ')' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push(&s[start..=i]);
                }
            }
            _ => {}
        }
    }
    spans
}

/// Tolerant parse of a model's triple output. Strict JSON is tried first;
/// otherwise every top-level `( ... )` span is read as an entry.
pub fn parse_triple_response(text: &str) -> Result<ParsedResponse, TripleError> {
    let mut out = ParsedResponse::default();
    if let Some(v) = parse_json_lenient(text) {
        if entries_from_json(&v, &mut out) {
            return Ok(out);
        }
    }
    let body = collapse_double_braces(strip_code_fence(text));
    let unescaped = body.replace("\\\"", "\"");
    let spans = paren_spans(&unescaped);
    if spans.is_empty() {
        return Err(TripleError::UnparseableResponse);
    }
    out.key = KEY.captures(&unescaped).map(|c| c[1].to_string());
    for span in spans {
        match parse_triple_entry(span) {
            Ok(t) => out.entries.push(t),
            Err(e) => out.malformed.push(e.into()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleStatus {
    Active,
    Superseded,
    /// Dropped by a later plot's extraction without a successor.
    Retired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    PronounInObject,
    SubjectMismatch,
    UnknownTarget,
    DimensionMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentalStateTriple {
    pub id: String,
    pub book_id: String,
    pub subject: String,
    pub predicate_raw: String,
    pub dimension: Dimension,
    pub target: Option<String>,
    pub object: String,
    pub plot_index: u32,
    pub status: TripleStatus,
    pub supersedes: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl MentalStateTriple {
    /// Classifies `raw` and derives its target. The id hashes content,
    /// position and ordinal, so reruns reproduce it.
    pub fn from_raw(raw: &RawTriple, book_id: &str, plot_index: u32, ordinal: usize) -> Result<Self, TripleError> {
        let dimension = classify_dimension(&raw.predicate)?;
        let id = sha256_hex(format!(
            "{book_id}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{plot_index}\u{1f}{ordinal}",
            raw.subject, raw.predicate, raw.object
        ))[..16]
            .to_string();
        Ok(Self {
            id,
            book_id: book_id.to_string(),
            subject: raw.subject.clone(),
            predicate_raw: raw.predicate.clone(),
            dimension,
            target: extract_target(&raw.predicate, &raw.object),
            object: raw.object.clone(),
            plot_index,
            status: TripleStatus::Active,
            supersedes: None,
            violations: Vec::new(),
        })
    }

    pub fn render(&self) -> String {
        format!("({}, {}, {})", self.subject, self.predicate_raw, self.object)
    }

    pub fn raw(&self) -> RawTriple {
        RawTriple { subject: self.subject.clone(), predicate: self.predicate_raw.clone(), object: self.object.clone() }
    }
}

const PRONOUNS: &[&str] = &["he", "she", "his", "her", "him", "they", "them", "their"];

pub fn has_pronoun(text: &str) -> bool {
    text.split(|c: char| !c.is_alphanumeric())
        .any(|tok| PRONOUNS.iter().any(|p| tok.eq_ignore_ascii_case(p)))
}

/// Perspective and consistency checks. Total: problems come back as data.
pub fn validate_triple(
    triple: &MentalStateTriple,
    character: &str,
    visible_cast: &BTreeSet<String>,
    registry: Option<&CharacterRegistry>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if has_pronoun(&triple.object) {
        out.push(Violation::PronounInObject);
    }
    if triple.subject != character {
        out.push(Violation::SubjectMismatch);
    }
    if let Some(target) = &triple.target {
        let canonical = registry.and_then(|r| r.lookup(target).ok().flatten()).unwrap_or(target);
        let known = visible_cast.contains(target)
            || visible_cast.contains(canonical)
            || registry.is_some_and(|r| r.knows(target));
        if !known {
            out.push(Violation::UnknownTarget);
        }
    }
    if classify_dimension(&triple.predicate_raw).ok() != Some(triple.dimension) {
        out.push(Violation::DimensionMismatch);
    }
    out
}

/// One extraction result for a (character, plot) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleBatch {
    pub book_id: String,
    pub character: String,
    pub plot_index: u32,
    pub triples: Vec<MentalStateTriple>,
    pub raw_response: String,
}

impl TripleBatch {
    /// Panics if any triple belongs to another subject or plot.
    pub fn new(
        book_id: &str,
        character: &str,
        plot_index: u32,
        triples: Vec<MentalStateTriple>,
        raw_response: String,
    ) -> Self {
        for t in &triples {
            assert_eq!(t.subject, character, "triple subject must match batch character");
            assert_eq!(t.plot_index, plot_index, "triple plot must match batch plot");
        }
        Self { book_id: book_id.into(), character: character.into(), plot_index, triples, raw_response }
    }

    /// Canonical JSON serialization, readable by [`parse_triple_response`].
    pub fn render(&self) -> String {
        let entries: Vec<String> = self.triples.iter().map(MentalStateTriple::render).collect();
        let mut map = serde_json::Map::new();
        map.insert("Target Character".into(), Value::from(entries));
        serde_json::to_string_pretty(&Value::Object(map)).expect("batch renders")
    }
}

/// An entry that did not make it into a batch, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedTriple {
    pub book_id: String,
    pub character: String,
    pub plot_index: u32,
    pub entry: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationPolicy {
    /// Reject triples that carry any violation instead of flagging them.
    pub strict: bool,
}

pub struct BatchContext<'a> {
    pub book_id: &'a str,
    pub character: &'a str,
    pub plot: &'a Plot,
    pub registry: Option<&'a CharacterRegistry>,
    pub policy: ValidationPolicy,
}

/// Classifies, resolves and validates parsed entries into a batch plus the
/// entries that were quarantined.
pub fn assemble_batch(
    ctx: &BatchContext<'_>,
    parsed: &ParsedResponse,
    raw_response: &str,
) -> (TripleBatch, Vec<RejectedTriple>) {
    let reject = |entry: String, reason: String| RejectedTriple {
        book_id: ctx.book_id.into(),
        character: ctx.character.into(),
        plot_index: ctx.plot.index,
        entry,
        reason,
    };
    let mut rejects: Vec<RejectedTriple> = parsed
        .malformed
        .iter()
        .map(|m| reject(m.entry.clone(), m.reason.clone()))
        .collect();
    let cast = ctx.plot.visible_cast(ctx.character);
    let mut triples = Vec::new();
    for raw in &parsed.entries {
        let mut raw = raw.clone();
        let placeholder = raw.subject.eq_ignore_ascii_case("Target Character");
        let resolved = ctx.registry.and_then(|r| r.lookup(&raw.subject).ok().flatten());
        if placeholder || resolved == Some(ctx.character) {
            raw.subject = ctx.character.to_string();
        }
        let mut t = match MentalStateTriple::from_raw(&raw, ctx.book_id, ctx.plot.index, triples.len()) {
            Ok(t) => t,
            Err(e) => {
                rejects.push(reject(raw.render(), e.to_string()));
                continue;
            }
        };
        let violations = validate_triple(&t, ctx.character, &cast, ctx.registry);
        if violations.contains(&Violation::SubjectMismatch) {
            rejects.push(reject(raw.render(), format!("subject `{}` is not {}", raw.subject, ctx.character)));
            continue;
        }
        if ctx.policy.strict && !violations.is_empty() {
            rejects.push(reject(raw.render(), format!("violations: {violations:?}")));
            continue;
        }
        t.violations = violations;
        triples.push(t);
    }
    (TripleBatch::new(ctx.book_id, ctx.character, ctx.plot.index, triples, raw_response.into()), rejects)
}

/// Renders prior triples one per line, oldest plot first.
pub fn render_previous(previous: &[MentalStateTriple]) -> String {
    let mut sorted: Vec<&MentalStateTriple> = previous.iter().collect();
    sorted.sort_by_key(|t| t.plot_index);
    sorted.iter().map(|t| t.render()).collect::<Vec<_>>().join("\n")
}

pub fn build_extraction_prompt(
    template: &Template,
    plot: &Plot,
    character: &str,
    previous: &[MentalStateTriple],
    model_id: &str,
    seed: Option<u64>,
) -> Result<ChatRequest, TripleError> {
    if !plot.has_speaker(character) {
        return Err(TripleError::CharacterAbsent { character: character.into(), plot: plot.index });
    }
    let prompt = template.render(&[
        ("plot_summary", plot.summary.as_str()),
        ("scenario", plot.scenario.as_str()),
        ("dialogues", plot.render_dialogues_for(character).trim_end()),
        ("character", character),
        ("previous_triples", &render_previous(previous)),
    ])?;
    Ok(ChatRequest::user_prompt(model_id, prompt, seed))
}
