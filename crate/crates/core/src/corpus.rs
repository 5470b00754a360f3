//! Plot-segmented narrative corpus.
//!
//! Books are ingested either from CoSER-style JSON (one file per book) or from
//! the normalized JSONL form this crate writes (one file per book, one plot per
//! line). Dialogue lines are split into speech, `(action)` and `[thought]`
//! segments, and speakers are resolved to canonical names through a per-book
//! [`CharacterRegistry`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::util::{self, format_ratio_2dp, normalize_ws_lower};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("unreadable source {path}: {reason}")]
    UnreadableSource { path: PathBuf, reason: String },
    #[error("malformed record {record}: {reason}")]
    MalformedRecord { record: String, reason: String },
    #[error("duplicate plot index {index} in book `{book_id}`")]
    DuplicatePlotIndex { book_id: String, index: u32 },
    #[error("name `{name}` is ambiguous between {candidates:?}")]
    AmbiguousAlias { name: String, candidates: Vec<String> },
    #[error("alias table: {0}")]
    AliasTable(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TurnError {
    #[error("no `Name:` speaker prefix in line: {0}")]
    NoSpeaker(String),
    #[error("empty utterance for speaker `{0}`")]
    EmptyUtterance(String),
}

// ---------------------------------------------------------------------------
// Dialogue segmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Speech,
    Action,
    Thought,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceSegment {
    pub kind: SegmentKind,
    pub text: String,
}

impl UtteranceSegment {
    pub fn speech(text: impl Into<String>) -> Self {
        Self { kind: SegmentKind::Speech, text: text.into() }
    }
    pub fn action(text: impl Into<String>) -> Self {
        Self { kind: SegmentKind::Action, text: text.into() }
    }
    pub fn thought(text: impl Into<String>) -> Self {
        Self { kind: SegmentKind::Thought, text: text.into() }
    }

    /// Source form with delimiters restored.
    pub fn render(&self) -> String {
        match self.kind {
            SegmentKind::Speech => self.text.clone(),
            SegmentKind::Action => format!("({})", self.text),
            SegmentKind::Thought => format!("[{}]", self.text),
        }
    }
}

/// Non-fatal problem found while segmenting an utterance. The offending span is
/// kept as speech.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentWarning {
    UnbalancedDelimiter { offset: usize, delimiter: char },
    NestedDelimiter { offset: usize },
    EmptySpan { offset: usize },
}

impl fmt::Display for SegmentWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnbalancedDelimiter { offset, delimiter } => {
                write!(f, "unbalanced `{delimiter}` at byte {offset}, kept as speech")
            }
            Self::NestedDelimiter { offset } => {
                write!(f, "nested delimiters at byte {offset}, span kept as speech")
            }
            Self::EmptySpan { offset } => write!(f, "empty delimited span at byte {offset}"),
        }
    }
}

/// Splits an utterance into ordered segments: `[...]` thoughts, `(...)` actions,
/// everything else speech. Nesting is not supported; nested or unbalanced spans
/// degrade to speech and produce a warning.
pub fn parse_utterance(text: &str) -> (Vec<UtteranceSegment>, Vec<SegmentWarning>) {
    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    let mut speech = String::new();
    let flush = |speech: &mut String, segments: &mut Vec<UtteranceSegment>| {
        let t = speech.trim();
        if !t.is_empty() {
            segments.push(UtteranceSegment::speech(t));
        }
        speech.clear();
    };

    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().expect("in bounds");
        let width = c.len_utf8();
        match c {
            '[' | '(' => {
                let closer = if c == '[' { ']' } else { ')' };
                let Some(rel) = text[i + width..].find(closer) else {
                    warnings.push(SegmentWarning::UnbalancedDelimiter { offset: i, delimiter: c });
                    speech.push(c);
                    i += width;
                    continue;
                };
                let end = i + width + rel;
                let inner = &text[i + width..end];
                if inner.contains(['[', ']', '(', ')']) {
                    warnings.push(SegmentWarning::NestedDelimiter { offset: i });
                    speech.push_str(&text[i..end + closer.len_utf8()]);
                } else if inner.trim().is_empty() {
                    warnings.push(SegmentWarning::EmptySpan { offset: i });
                    speech.push_str(&text[i..end + closer.len_utf8()]);
                } else {
                    flush(&mut speech, &mut segments);
                    let seg = if c == '[' {
                        UtteranceSegment::thought(inner.trim())
                    } else {
                        UtteranceSegment::action(inner.trim())
                    };
                    segments.push(seg);
                }
                i = end + closer.len_utf8();
            }
            ']' | ')' => {
                warnings.push(SegmentWarning::UnbalancedDelimiter { offset: i, delimiter: c });
                speech.push(c);
                i += width;
            }
            _ => {
                speech.push(c);
                i += width;
            }
        }
    }
    flush(&mut speech, &mut segments);
    (segments, warnings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub segments: Vec<UtteranceSegment>,
}

impl Turn {
    /// The utterance with delimiters restored, segments joined by single spaces.
    pub fn utterance(&self) -> String {
        self.segments.iter().map(UtteranceSegment::render).collect::<Vec<_>>().join(" ")
    }

    /// `Speaker: utterance`.
    pub fn render_line(&self) -> String {
        format!("{}: {}", self.speaker, self.utterance())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub turn: Turn,
    pub warnings: Vec<SegmentWarning>,
}

fn valid_speaker(name: &str) -> bool {
    !name.is_empty()
        && name.chars().count() <= 64
        && !name.contains(['[', ']', '(', ')', '!', '?', '"', '{', '}'])
}

/// Parses a `Speaker: utterance` line.
pub fn parse_turn(raw: &str) -> Result<ParsedTurn, TurnError> {
    let line = raw.trim().trim_matches('"').trim();
    let (speaker, rest) = line
        .split_once(':')
        .map(|(s, r)| (s.trim(), r))
        .filter(|(s, _)| valid_speaker(s))
        .ok_or_else(|| TurnError::NoSpeaker(raw.to_string()))?;
    build_turn(speaker, rest)
}

/// Builds a turn from an already separated speaker and message.
pub fn build_turn(speaker: &str, message: &str) -> Result<ParsedTurn, TurnError> {
    let (segments, warnings) = parse_utterance(message);
    if segments.is_empty() {
        return Err(TurnError::EmptyUtterance(speaker.to_string()));
    }
    for w in &warnings {
        log::warn!("{speaker}: {w}");
    }
    Ok(ParsedTurn { turn: Turn { speaker: speaker.to_string(), segments }, warnings })
}

// ---------------------------------------------------------------------------
// Character registry
// ---------------------------------------------------------------------------

/// Per-book mapping from canonical character names to their aliases.
///
/// Matching is exact after lowercasing and whitespace normalization. An alias
/// listed under two canonical names is held in a separate ambiguous table so the
/// per-name alias sets stay disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RegistryRepr", into = "RegistryRepr")]
pub struct CharacterRegistry {
    canonical: BTreeMap<String, BTreeSet<String>>,
    ambiguous: BTreeMap<String, BTreeSet<String>>,
    index: HashMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RegistryRepr {
    canonical: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    ambiguous: BTreeMap<String, BTreeSet<String>>,
}

impl From<RegistryRepr> for CharacterRegistry {
    fn from(r: RegistryRepr) -> Self {
        let mut reg = CharacterRegistry { canonical: r.canonical, ambiguous: r.ambiguous, index: HashMap::new() };
        reg.rebuild_index();
        reg
    }
}

impl From<CharacterRegistry> for RegistryRepr {
    fn from(r: CharacterRegistry) -> Self {
        RegistryRepr { canonical: r.canonical, ambiguous: r.ambiguous }
    }
}

impl CharacterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn rebuild_index(&mut self) {
        self.index.clear();
        for (canon, aliases) in &self.canonical {
            for a in aliases {
                self.index.insert(normalize_ws_lower(a), canon.clone());
            }
        }
    }

    /// Parses an alias table: blank-line separated stanzas, first line the
    /// canonical name, following lines its aliases. `#` starts a comment line.
    pub fn parse_alias_table(text: &str) -> Result<Self, CorpusError> {
        let mut reg = Self::new();
        let mut stanza: Vec<&str> = Vec::new();
        let mut stanzas = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                if !stanza.is_empty() {
                    stanzas.push(std::mem::take(&mut stanza));
                }
            } else {
                stanza.push(line);
            }
        }
        if !stanza.is_empty() {
            stanzas.push(stanza);
        }
        for s in &stanzas {
            reg.add_canonical(s[0])?;
        }
        for s in &stanzas {
            for alias in &s[1..] {
                reg.add_alias(s[0], alias)?;
            }
        }
        Ok(reg)
    }

    pub fn add_canonical(&mut self, name: &str) -> Result<(), CorpusError> {
        let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(CorpusError::AliasTable("empty canonical name".into()));
        }
        let key = normalize_ws_lower(&name);
        match self.index.get(&key) {
            Some(existing) if *existing == name => Ok(()),
            Some(existing) => Err(CorpusError::AliasTable(format!(
                "canonical name `{name}` already claimed by `{existing}`"
            ))),
            None => {
                self.canonical.entry(name.clone()).or_default().insert(name.clone());
                self.index.insert(key, name);
                Ok(())
            }
        }
    }

    pub fn add_alias(&mut self, canonical: &str, alias: &str) -> Result<(), CorpusError> {
        let canonical = canonical.split_whitespace().collect::<Vec<_>>().join(" ");
        let alias = alias.split_whitespace().collect::<Vec<_>>().join(" ");
        if !self.canonical.contains_key(&canonical) {
            self.add_canonical(&canonical)?;
        }
        let key = normalize_ws_lower(&alias);
        if let Some(cands) = self.ambiguous.get_mut(&key) {
            cands.insert(canonical);
            return Ok(());
        }
        match self.index.get(&key).cloned() {
            None => {
                self.canonical.get_mut(&canonical).expect("present").insert(alias);
                self.index.insert(key, canonical);
            }
            Some(owner) if owner == canonical => {}
            Some(owner) => {
                if self.canonical.contains_key(&alias) || normalize_ws_lower(&owner) == key {
                    return Err(CorpusError::AliasTable(format!(
                        "alias `{alias}` collides with canonical name `{owner}`"
                    )));
                }
                let set = self.canonical.get_mut(&owner).expect("owner present");
                set.retain(|a| normalize_ws_lower(a) != key);
                self.index.remove(&key);
                self.ambiguous.insert(key, [owner, canonical].into_iter().collect());
            }
        }
        Ok(())
    }

    /// Non-mutating lookup.
    pub fn lookup(&self, name: &str) -> Result<Option<&str>, CorpusError> {
        let key = normalize_ws_lower(name);
        if let Some(cands) = self.ambiguous.get(&key) {
            return Err(CorpusError::AmbiguousAlias {
                name: name.to_string(),
                candidates: cands.iter().cloned().collect(),
            });
        }
        Ok(self.index.get(&key).map(String::as_str))
    }

    /// Resolves `name` to its canonical form, registering it as a new canonical
    /// entry when unknown.
    pub fn resolve(&mut self, name: &str) -> Result<String, CorpusError> {
        if let Some(c) = self.lookup(name)? {
            return Ok(c.to_string());
        }
        let clean = name.split_whitespace().collect::<Vec<_>>().join(" ");
        self.add_canonical(&clean)?;
        Ok(clean)
    }

    pub fn canonical_names(&self) -> impl Iterator<Item = &str> {
        self.canonical.keys().map(String::as_str)
    }

    pub fn aliases(&self, canonical: &str) -> Option<&BTreeSet<String>> {
        self.canonical.get(canonical)
    }

    /// True when `name` matches any canonical name or alias (ambiguous aliases
    /// included).
    pub fn knows(&self, name: &str) -> bool {
        let key = normalize_ws_lower(name);
        self.index.contains_key(&key) || self.ambiguous.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }
}

/// Free-function form of [`CharacterRegistry::resolve`].
pub fn resolve_character(name: &str, registry: &mut CharacterRegistry) -> Result<String, CorpusError> {
    registry.resolve(name)
}

// ---------------------------------------------------------------------------
// Corpus records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlotRef {
    pub book_id: String,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub plot_ref: PlotRef,
    pub environment: String,
    /// Named participants: listed key characters plus every speaker.
    pub cast: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Distinct speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.turns
            .iter()
            .map(|t| t.speaker.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn has_speaker(&self, name: &str) -> bool {
        self.turns.iter().any(|t| t.speaker == name)
    }

    /// `Environment: ...` followed by one `Speaker: utterance` line per turn.
    pub fn render_dialogue(&self) -> String {
        let mut out = String::new();
        if !self.environment.is_empty() {
            out.push_str("Environment: ");
            out.push_str(&self.environment);
            out.push('\n');
        }
        for t in &self.turns {
            out.push_str(&t.render_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plot {
    pub book_id: String,
    pub index: u32,
    pub summary: String,
    pub scenario: String,
    pub conversations: Vec<Conversation>,
}

impl Plot {
    /// Distinct speakers across the plot, sorted.
    pub fn speakers(&self) -> BTreeSet<&str> {
        self.conversations.iter().flat_map(|c| c.turns.iter().map(|t| t.speaker.as_str())).collect()
    }

    pub fn has_speaker(&self, name: &str) -> bool {
        self.conversations.iter().any(|c| c.has_speaker(name))
    }

    /// Union of the casts of conversations where `character` speaks.
    pub fn visible_cast(&self, character: &str) -> BTreeSet<String> {
        self.conversations
            .iter()
            .filter(|c| c.has_speaker(character))
            .flat_map(|c| c.cast.iter().cloned())
            .collect()
    }

    /// Dialogues of every conversation `character` speaks in.
    pub fn render_dialogues_for(&self, character: &str) -> String {
        self.conversations
            .iter()
            .filter(|c| c.has_speaker(character))
            .map(Conversation::render_dialogue)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Book {
    pub id: String,
    pub title: String,
    pub plots: Vec<Plot>,
}

impl Book {
    pub fn plot(&self, index: u32) -> Option<&Plot> {
        index.checked_sub(1).and_then(|i| self.plots.get(i as usize)).filter(|p| p.index == index)
    }

    pub fn plot_count(&self) -> u32 {
        self.plots.len() as u32
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub books: Vec<Book>,
    pub registries: BTreeMap<String, CharacterRegistry>,
}

impl Corpus {
    pub fn book(&self, id: &str) -> Option<&Book> {
        self.books.iter().find(|b| b.id == id)
    }

    /// Finds a book by id or exact title.
    pub fn find_book(&self, id_or_title: &str) -> Option<&Book> {
        self.books.iter().find(|b| b.id == id_or_title || b.title == id_or_title)
    }

    pub fn plot(&self, book_id: &str, index: u32) -> Option<&Plot> {
        self.book(book_id).and_then(|b| b.plot(index))
    }

    /// Writes one `<book_id>.jsonl` per book into `dir`, one plot per line.
    pub fn write_normalized(&self, dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for book in &self.books {
            let records = book.plots.iter().map(|p| PlotRecord {
                book_id: book.id.clone(),
                title: book.title.clone(),
                index: p.index,
                summary: p.summary.clone(),
                scenario: p.scenario.clone(),
                conversations: p.conversations.iter().map(ConversationRecord::from).collect(),
            });
            let text = util::to_jsonl(records).map_err(|e| CorpusError::MalformedRecord {
                record: book.id.clone(),
                reason: e.to_string(),
            })?;
            let path = dir.join(format!("{}.jsonl", book.id));
            util::write_atomic(&path, text.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

/// One line of the normalized corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotRecord {
    pub book_id: String,
    pub title: String,
    pub index: u32,
    pub summary: String,
    pub scenario: String,
    pub conversations: Vec<ConversationRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversationRecord {
    pub environment: String,
    pub cast: Vec<String>,
    pub turns: Vec<Turn>,
}

impl From<&Conversation> for ConversationRecord {
    fn from(c: &Conversation) -> Self {
        Self { environment: c.environment.clone(), cast: c.cast.clone(), turns: c.turns.clone() }
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// CoSER-style JSON, one file per book.
    Coser,
    /// Normalized JSONL written by [`Corpus::write_normalized`].
    Normalized,
}

impl CorpusFormat {
    fn extension(self) -> &'static str {
        match self {
            Self::Coser => "json",
            Self::Normalized => "jsonl",
        }
    }
}

/// Source field names for CoSER-style input. Each entry lists candidate keys;
/// the first one present in a record is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub title: Vec<String>,
    pub plots: Vec<String>,
    pub plot_index: Vec<String>,
    pub summary: Vec<String>,
    pub scenario: Vec<String>,
    pub conversations: Vec<String>,
    pub environment: Vec<String>,
    pub key_characters: Vec<String>,
    pub character_name: Vec<String>,
    pub dialogues: Vec<String>,
    pub speaker: Vec<String>,
    pub message: Vec<String>,
}

fn keys(ks: &[&str]) -> Vec<String> {
    ks.iter().map(|s| s.to_string()).collect()
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            title: keys(&["title", "book"]),
            plots: keys(&["plots"]),
            plot_index: Vec::new(),
            summary: keys(&["summary", "plot_summary"]),
            scenario: keys(&["plot_scenario"]),
            conversations: keys(&["conversations", "conversation"]),
            environment: keys(&["environment", "scenario", "setting"]),
            key_characters: keys(&["key_characters", "characters"]),
            character_name: keys(&["name"]),
            dialogues: keys(&["dialogues", "dialogue"]),
            speaker: keys(&["character", "speaker", "name"]),
            message: keys(&["message", "text", "utterance"]),
        }
    }
}

fn pick<'a>(obj: &'a serde_json::Map<String, Value>, candidates: &[String]) -> Option<&'a Value> {
    candidates.iter().find_map(|k| obj.get(k))
}

fn pick_str(obj: &serde_json::Map<String, Value>, candidates: &[String]) -> Option<String> {
    pick(obj, candidates).and_then(Value::as_str).map(|s| s.trim().to_string())
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub fields: FieldMap,
    /// Directory holding `<book_id>.aliases` tables.
    pub alias_dir: Option<PathBuf>,
}

/// Loads every book under `path` (a file or a directory of files with the
/// format's extension). Books are parsed in parallel and returned sorted by id.
pub fn ingest_corpus(path: &Path, format: CorpusFormat, opts: &IngestOptions) -> Result<Corpus, CorpusError> {
    let files = source_files(path, format)?;
    let parsed: Vec<Vec<(Book, CharacterRegistry)>> = files
        .par_iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| CorpusError::UnreadableSource {
                path: f.clone(),
                reason: e.to_string(),
            })?;
            match format {
                CorpusFormat::Coser => {
                    let id = util::slug(&f.file_stem().unwrap_or_default().to_string_lossy());
                    let registry = load_registry(opts, &id)?;
                    parse_coser_book(&id, &text, &opts.fields, registry).map(|b| vec![b])
                }
                CorpusFormat::Normalized => parse_normalized(&f.display().to_string(), &text, opts),
            }
        })
        .collect::<Result<_, _>>()?;

    let mut corpus = Corpus::default();
    for (book, reg) in parsed.into_iter().flatten() {
        if corpus.registries.contains_key(&book.id) {
            return Err(CorpusError::MalformedRecord {
                record: book.id.clone(),
                reason: "book id appears in more than one source file".into(),
            });
        }
        corpus.registries.insert(book.id.clone(), reg);
        corpus.books.push(book);
    }
    corpus.books.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(corpus)
}

fn source_files(path: &Path, format: CorpusFormat) -> Result<Vec<PathBuf>, CorpusError> {
    let unreadable = |reason: String| CorpusError::UnreadableSource { path: path.to_path_buf(), reason };
    let meta = fs::metadata(path).map_err(|e| unreadable(e.to_string()))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| unreadable(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == format.extension()))
        .collect();
    if files.is_empty() {
        return Err(unreadable(format!("no .{} files found", format.extension())));
    }
    files.sort();
    Ok(files)
}

fn load_registry(opts: &IngestOptions, book_id: &str) -> Result<CharacterRegistry, CorpusError> {
    let Some(dir) = &opts.alias_dir else {
        return Ok(CharacterRegistry::new());
    };
    let path = dir.join(format!("{book_id}.aliases"));
    match fs::read_to_string(&path) {
        Ok(text) => CharacterRegistry::parse_alias_table(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(CharacterRegistry::new()),
        Err(e) => Err(e.into()),
    }
}

fn malformed(record: impl Into<String>, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRecord { record: record.into(), reason: reason.into() }
}

/// Parses one CoSER-style book document.
pub fn parse_coser_book(
    book_id: &str,
    text: &str,
    fields: &FieldMap,
    mut registry: CharacterRegistry,
) -> Result<(Book, CharacterRegistry), CorpusError> {
    let root: Value = serde_json::from_str(text).map_err(|e| malformed(book_id, e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| malformed(book_id, "top level is not an object"))?;
    let title = pick_str(obj, &fields.title).unwrap_or_else(|| book_id.to_string());
    let plots_v = pick(obj, &fields.plots)
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(book_id, "missing plots array"))?;

    let mut plots = Vec::with_capacity(plots_v.len());
    let mut seen_idx = BTreeSet::new();
    for (pos, pv) in plots_v.iter().enumerate() {
        let rec = format!("{book_id}/plot[{pos}]");
        let po = pv.as_object().ok_or_else(|| malformed(&rec, "plot is not an object"))?;
        let index = match pick(po, &fields.plot_index) {
            Some(v) => v
                .as_u64()
                .filter(|&i| i >= 1 && i <= u32::MAX as u64)
                .ok_or_else(|| malformed(&rec, "plot index must be a positive integer"))?
                as u32,
            None => pos as u32 + 1,
        };
        if !seen_idx.insert(index) {
            return Err(CorpusError::DuplicatePlotIndex { book_id: book_id.to_string(), index });
        }
        let summary = pick_str(po, &fields.summary).unwrap_or_default();
        if summary.is_empty() {
            return Err(malformed(&rec, "empty summary"));
        }
        let convs_v = pick(po, &fields.conversations).and_then(Value::as_array).cloned().unwrap_or_default();
        let mut conversations = Vec::with_capacity(convs_v.len());
        for (ci, cv) in convs_v.iter().enumerate() {
            let crec = format!("{rec}/conversation[{ci}]");
            conversations.push(parse_coser_conversation(&crec, cv, fields, &mut registry, book_id, index)?);
        }
        let scenario = pick_str(po, &fields.scenario)
            .filter(|s| !s.is_empty())
            .or_else(|| conversations.first().map(|c: &Conversation| c.environment.clone()))
            .unwrap_or_default();
        if scenario.is_empty() {
            return Err(malformed(&rec, "no scenario available"));
        }
        plots.push(Plot { book_id: book_id.to_string(), index, summary, scenario, conversations });
    }
    plots.sort_by_key(|p| p.index);
    validate_indices(book_id, &plots)?;
    Ok((Book { id: book_id.to_string(), title, plots }, registry))
}

fn parse_coser_conversation(
    rec: &str,
    cv: &Value,
    fields: &FieldMap,
    registry: &mut CharacterRegistry,
    book_id: &str,
    plot_index: u32,
) -> Result<Conversation, CorpusError> {
    let co = cv.as_object().ok_or_else(|| malformed(rec, "conversation is not an object"))?;
    let environment = pick_str(co, &fields.environment).unwrap_or_default();

    let mut cast: Vec<String> = Vec::new();
    let add_cast = |name: String, cast: &mut Vec<String>| {
        if !cast.contains(&name) {
            cast.push(name);
        }
    };
    if let Some(kc) = pick(co, &fields.key_characters).and_then(Value::as_array) {
        for k in kc {
            let name = match k {
                Value::String(s) => Some(s.clone()),
                Value::Object(o) => pick_str(o, &fields.character_name),
                _ => None,
            };
            if let Some(n) = name.filter(|n| !n.trim().is_empty()) {
                let canon = registry.resolve(&n).map_err(|e| malformed(rec, e.to_string()))?;
                add_cast(canon, &mut cast);
            }
        }
    }

    let lines: Vec<Value> = match pick(co, &fields.dialogues) {
        Some(Value::Array(a)) => a.clone(),
        Some(Value::String(s)) => s.lines().filter(|l| !l.trim().is_empty()).map(|l| Value::String(l.into())).collect(),
        _ => Vec::new(),
    };
    let mut turns = Vec::with_capacity(lines.len());
    for (ti, lv) in lines.iter().enumerate() {
        let trec = format!("{rec}/turn[{ti}]");
        let parsed = match lv {
            Value::String(s) => {
                if s.trim_start().starts_with("Environment:") {
                    continue;
                }
                parse_turn(s)
            }
            Value::Object(o) => {
                let sp = pick_str(o, &fields.speaker).ok_or_else(|| malformed(&trec, "missing speaker"))?;
                let msg = pick_str(o, &fields.message).unwrap_or_default();
                build_turn(&sp, &msg)
            }
            _ => return Err(malformed(&trec, "dialogue entry is neither string nor object")),
        };
        let mut turn = parsed.map_err(|e| malformed(&trec, e.to_string()))?.turn;
        turn.speaker = registry.resolve(&turn.speaker).map_err(|e| malformed(&trec, e.to_string()))?;
        add_cast(turn.speaker.clone(), &mut cast);
        turns.push(turn);
    }
    if turns.is_empty() {
        return Err(malformed(rec, "conversation has no turns"));
    }
    Ok(Conversation {
        plot_ref: PlotRef { book_id: book_id.to_string(), index: plot_index },
        environment,
        cast,
        turns,
    })
}

fn validate_indices(book_id: &str, plots: &[Plot]) -> Result<(), CorpusError> {
    for (i, p) in plots.iter().enumerate() {
        if p.index != i as u32 + 1 {
            return Err(malformed(
                book_id,
                format!("plot indices must be contiguous from 1; found {} at position {}", p.index, i + 1),
            ));
        }
    }
    Ok(())
}

fn parse_normalized(
    source: &str,
    text: &str,
    opts: &IngestOptions,
) -> Result<Vec<(Book, CharacterRegistry)>, CorpusError> {
    let records: Vec<PlotRecord> =
        util::from_jsonl(text).map_err(|(line, e)| malformed(format!("{source}:{line}"), e.to_string()))?;
    let mut books: BTreeMap<String, (String, Vec<Plot>)> = BTreeMap::new();
    let mut seen: BTreeSet<(String, u32)> = BTreeSet::new();
    for r in records {
        let rec = format!("{}/plot[{}]", r.book_id, r.index);
        if r.index == 0 {
            return Err(malformed(&rec, "plot index must be positive"));
        }
        if !seen.insert((r.book_id.clone(), r.index)) {
            return Err(CorpusError::DuplicatePlotIndex { book_id: r.book_id, index: r.index });
        }
        if r.summary.trim().is_empty() || r.scenario.trim().is_empty() {
            return Err(malformed(&rec, "summary and scenario must be non-empty"));
        }
        let conversations = r
            .conversations
            .into_iter()
            .enumerate()
            .map(|(ci, c)| {
                if c.turns.is_empty() {
                    return Err(malformed(format!("{rec}/conversation[{ci}]"), "conversation has no turns"));
                }
                if let Some(t) = c.turns.iter().find(|t| t.segments.is_empty()) {
                    return Err(malformed(format!("{rec}/conversation[{ci}]"), format!("turn by {} has no segments", t.speaker)));
                }
                Ok(Conversation {
                    plot_ref: PlotRef { book_id: r.book_id.clone(), index: r.index },
                    environment: c.environment,
                    cast: c.cast,
                    turns: c.turns,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let entry = books.entry(r.book_id.clone()).or_insert_with(|| (r.title.clone(), Vec::new()));
        entry.1.push(Plot {
            book_id: r.book_id,
            index: r.index,
            summary: r.summary,
            scenario: r.scenario,
            conversations,
        });
    }
    let mut out = Vec::new();
    for (id, (title, mut plots)) in books {
        plots.sort_by_key(|p| p.index);
        validate_indices(&id, &plots)?;
        let mut registry = load_registry(opts, &id)?;
        for c in plots.iter().flat_map(|p| &p.conversations) {
            for name in c.cast.iter().chain(c.turns.iter().map(|t| &t.speaker)) {
                registry.resolve(name)?;
            }
        }
        out.push((Book { id, title, plots }, registry));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookStats {
    pub book_id: String,
    pub title: String,
    pub plots: u64,
    pub conversations: u64,
    /// Sum over conversations of distinct speaker counts.
    pub speaker_sum: u64,
}

impl BookStats {
    /// Mean distinct speakers per conversation, two decimals, half up.
    pub fn avg_characters(&self) -> String {
        format_ratio_2dp(self.speaker_sum, self.conversations)
    }

    /// False when there are no conversations and the mean is undefined.
    pub fn mean_defined(&self) -> bool {
        self.conversations > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub books: Vec<BookStats>,
    pub total: BookStats,
}

impl StatsReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<48} {:>6} {:>14} {:>14}\n", "Book", "Plots", "Conversations", "Avg Character");
        let row = |s: &BookStats| {
            let avg = if s.mean_defined() { s.avg_characters() } else { format!("{} (undefined)", s.avg_characters()) };
            format!("{:<48} {:>6} {:>14} {:>14}\n", s.title, s.plots, s.conversations, avg)
        };
        for b in &self.books {
            out.push_str(&row(b));
        }
        out.push_str(&row(&self.total));
        out
    }
}

/// Per-book and total plot, conversation and mean-speaker counts.
pub fn corpus_stats(corpus: &Corpus) -> StatsReport {
    stats_for(corpus.books.iter())
}

/// Stats restricted to books selected by id or title.
pub fn corpus_stats_subset(corpus: &Corpus, books: &BTreeSet<String>) -> StatsReport {
    stats_for(corpus.books.iter().filter(|b| books.contains(&b.id) || books.contains(&b.title)))
}

fn stats_for<'a>(books: impl Iterator<Item = &'a Book>) -> StatsReport {
    let mut per_book = Vec::new();
    let mut total = BookStats { book_id: "total".into(), title: "Total".into(), plots: 0, conversations: 0, speaker_sum: 0 };
    for b in books {
        let convs = b.plots.iter().flat_map(|p| &p.conversations);
        let (n, sum) = convs.fold((0u64, 0u64), |(n, s), c| (n + 1, s + c.speakers().len() as u64));
        let s = BookStats {
            book_id: b.id.clone(),
            title: b.title.clone(),
            plots: b.plots.len() as u64,
            conversations: n,
            speaker_sum: sum,
        };
        total.plots += s.plots;
        total.conversations += s.conversations;
        total.speaker_sum += s.speaker_sum;
        per_book.push(s);
    }
    StatsReport { books: per_book, total }
}
