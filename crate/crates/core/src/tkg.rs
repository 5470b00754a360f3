//! Temporal knowledge graph of character mental states.
//!
//! Edges are triples tagged with the plot that produced them. Evolution is
//! recorded two ways: a [`SupersedeLink`] when a later triple replaces an
//! earlier one with the same dimension and target, and a [`Retirement`] when a
//! later extraction simply stops asserting a triple. Queries never read the
//! `status` field; they recompute visibility from links and retirements so
//! historical states stay answerable.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, RwLock};

use crate::triples::{Dimension, MentalStateTriple, TripleBatch, TripleStatus};
use crate::util::{normalize_ws_lower, sha256_hex, write_atomic};

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("{character}: batch for plot {got} arrives after plot {last}")]
    NonMonotoneInsert { character: String, last: u32, got: u32 },
    #[error("triple subject `{found}` in a batch for `{expected}`")]
    ForeignSubject { expected: String, found: String },
    #[error("plot {plot} outside 1..={count}")]
    PlotOutOfRange { plot: u32, count: u32 },
    #[error("unknown character `{0}`")]
    UnknownCharacter(String),
    #[error("batch for book `{found}` inserted into graph of `{expected}`")]
    BookMismatch { expected: String, found: String },
    #[error("edge id {0} already present")]
    DuplicateEdge(String),
    #[error("corrupt graph file: {0}")]
    CorruptGraphFile(String),
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupersedeReason {
    Refined,
    Contradicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupersedeLink {
    pub old_id: String,
    pub new_id: String,
    pub reason: SupersedeReason,
    /// Plot of the new triple, i.e. when the old one stopped holding.
    pub plot_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retirement {
    pub id: String,
    pub plot_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterNode {
    pub name: String,
    pub plots_seen: BTreeSet<u32>,
    /// Plot of the latest batch, which may have contributed no edges.
    pub last_batch: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    TrustLlmDiff,
    DeterministicMerge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub mode: MergeMode,
    pub jaccard_threshold: f64,
    /// Word pairs whose crossing between old and new object marks a contradiction.
    pub antonyms: Vec<(String, String)>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        let pairs = [
            ("love", "hate"),
            ("loves", "hates"),
            ("trust", "distrust"),
            ("trusts", "distrusts"),
            ("loyal", "disloyal"),
            ("honest", "dishonest"),
            ("faithful", "unfaithful"),
            ("happy", "unhappy"),
            ("true", "false"),
            ("innocent", "guilty"),
            ("friend", "enemy"),
            ("hope", "despair"),
        ];
        Self {
            mode: MergeMode::TrustLlmDiff,
            jaccard_threshold: 0.5,
            antonyms: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeLog {
    pub added: Vec<String>,
    /// Prior edges that the batch restated verbatim.
    pub unchanged: Vec<String>,
    pub links: Vec<SupersedeLink>,
    pub retired: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRecord {
    pub plot_index: u32,
    pub triple: MentalStateTriple,
    pub supersedes: Option<SupersedeLink>,
    /// Plot at which the triple stopped holding, if it has.
    pub ended_at: Option<u32>,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "to", "in", "on", "at", "by", "for", "with", "is", "are", "was", "were", "be",
    "been", "that", "this", "it", "as", "from",
];
const NEGATIONS: &[&str] = &["not", "no", "never", "nor", "none", "nothing", "without", "cannot", "nobody"];

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace("n't", " not")
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard overlap of lowercased content tokens.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let set = |s: &str| -> BTreeSet<String> { tokens(s).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect() };
    let (x, y) = (set(a), set(b));
    let union = x.union(&y).count();
    if union == 0 {
        return 1.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

/// Negation parity flip or a configured antonym crossing.
pub fn contradicts(old: &str, new: &str, antonyms: &[(String, String)]) -> bool {
    let (o, n) = (tokens(old), tokens(new));
    let negs = |ts: &[String]| ts.iter().filter(|t| NEGATIONS.contains(&t.as_str())).count() % 2;
    if negs(&o) != negs(&n) {
        return true;
    }
    let has = |ts: &[String], w: &str| ts.iter().any(|t| t == w);
    antonyms.iter().any(|(a, b)| {
        (has(&o, a) && has(&n, b) && !has(&o, b) && !has(&n, a)) || (has(&o, b) && has(&n, a) && !has(&o, a) && !has(&n, b))
    })
}

/// Identity used to pair an update with the triple it replaces.
fn merge_key(t: &MentalStateTriple) -> (Dimension, String) {
    let k = t.target.as_deref().map(normalize_ws_lower).unwrap_or_else(|| format!("~{}", normalize_ws_lower(&t.predicate_raw)));
    (t.dimension, k)
}

fn same_content(a: &MentalStateTriple, b: &MentalStateTriple) -> bool {
    a.dimension == b.dimension
        && normalize_ws_lower(&a.predicate_raw) == normalize_ws_lower(&b.predicate_raw)
        && normalize_ws_lower(&a.object) == normalize_ws_lower(&b.object)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKg {
    book_id: String,
    plot_count: u32,
    nodes: BTreeMap<String, CharacterNode>,
    edges: Vec<MentalStateTriple>,
    links: Vec<SupersedeLink>,
    retirements: Vec<Retirement>,
    index: HashMap<String, usize>,
}

impl TemporalKg {
    pub fn new(book_id: impl Into<String>, plot_count: u32) -> Self {
        Self {
            book_id: book_id.into(),
            plot_count,
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            links: Vec::new(),
            retirements: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn book_id(&self) -> &str {
        &self.book_id
    }
    pub fn plot_count(&self) -> u32 {
        self.plot_count
    }
    pub fn nodes(&self) -> impl Iterator<Item = &CharacterNode> {
        self.nodes.values()
    }
    pub fn node(&self, name: &str) -> Option<&CharacterNode> {
        self.nodes.get(name)
    }
    /// Edges in insertion order.
    pub fn edges(&self) -> &[MentalStateTriple] {
        &self.edges
    }
    pub fn edge(&self, id: &str) -> Option<&MentalStateTriple> {
        self.index.get(id).map(|&i| &self.edges[i])
    }
    pub fn links(&self) -> &[SupersedeLink] {
        &self.links
    }
    pub fn retirements(&self) -> &[Retirement] {
        &self.retirements
    }

    pub fn register_character(&mut self, name: &str) {
        self.nodes
            .entry(name.to_string())
            .or_insert_with(|| CharacterNode { name: name.to_string(), plots_seen: BTreeSet::new(), last_batch: None });
    }

    fn current_active(&self, character: &str) -> Vec<usize> {
        let ended: BTreeSet<&str> = self
            .links
            .iter()
            .map(|l| l.old_id.as_str())
            .chain(self.retirements.iter().map(|r| r.id.as_str()))
            .collect();
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.subject == character && !ended.contains(e.id.as_str()))
            .map(|(i, _)| i)
            .collect()
    }

    fn push_edge(&mut self, mut t: MentalStateTriple, log: &mut ChangeLog) {
        t.status = TripleStatus::Active;
        t.supersedes = None;
        self.index.insert(t.id.clone(), self.edges.len());
        self.nodes.get_mut(&t.subject).expect("registered").plots_seen.insert(t.plot_index);
        log.added.push(t.id.clone());
        self.edges.push(t);
    }

    fn link(&mut self, old: usize, new_id: &str, reason: SupersedeReason, plot: u32, log: &mut ChangeLog) {
        let old_id = self.edges[old].id.clone();
        self.edges[old].status = TripleStatus::Superseded;
        let new = self.index[new_id];
        self.edges[new].supersedes = Some(old_id.clone());
        let link = SupersedeLink { old_id, new_id: new_id.to_string(), reason, plot_index: plot };
        log.links.push(link.clone());
        self.links.push(link);
    }

    fn retire(&mut self, pos: usize, plot: u32, log: &mut ChangeLog) {
        self.edges[pos].status = TripleStatus::Retired;
        let id = self.edges[pos].id.clone();
        log.retired.push(id.clone());
        self.retirements.push(Retirement { id, plot_index: plot });
    }

    pub fn insert_batch(&mut self, batch: &TripleBatch, config: &MergeConfig) -> Result<ChangeLog, KgError> {
        let (c, p) = (batch.character.as_str(), batch.plot_index);
        if batch.book_id != self.book_id {
            return Err(KgError::BookMismatch { expected: self.book_id.clone(), found: batch.book_id.clone() });
        }
        if p == 0 || p > self.plot_count {
            return Err(KgError::PlotOutOfRange { plot: p, count: self.plot_count });
        }
        if let Some(last) = self.nodes.get(c).and_then(|n| n.last_batch) {
            if p < last {
                return Err(KgError::NonMonotoneInsert { character: c.into(), last, got: p });
            }
        }
        for t in &batch.triples {
            if t.subject != c {
                return Err(KgError::ForeignSubject { expected: c.into(), found: t.subject.clone() });
            }
            if t.plot_index != p {
                return Err(KgError::PlotOutOfRange { plot: t.plot_index, count: self.plot_count });
            }
            if self.index.contains_key(&t.id) {
                return Err(KgError::DuplicateEdge(t.id.clone()));
            }
        }
        self.register_character(c);
        self.nodes.get_mut(c).expect("registered").last_batch = Some(p);
        let mut log = ChangeLog::default();
        match config.mode {
            MergeMode::TrustLlmDiff => self.diff_insert(batch, config, &mut log),
            MergeMode::DeterministicMerge => self.merge_insert(batch, config, &mut log),
        }
        Ok(log)
    }

    /// The batch becomes the new active set; the prior set is diffed against it.
    fn diff_insert(&mut self, batch: &TripleBatch, config: &MergeConfig, log: &mut ChangeLog) {
        let p = batch.plot_index;
        let mut prior: Vec<Option<usize>> = self.current_active(&batch.character).into_iter().map(Some).collect();
        let mut fresh = Vec::new();
        for t in &batch.triples {
            let dup = prior.iter_mut().find(|slot| slot.is_some_and(|i| same_content(&self.edges[i], t)));
            match dup {
                Some(slot) => log.unchanged.push(self.edges[slot.take().expect("some")].id.clone()),
                None => fresh.push(t),
            }
        }
        for t in fresh {
            self.push_edge(t.clone(), log);
            let key = merge_key(t);
            let pred = prior.iter_mut().find(|slot| slot.is_some_and(|i| merge_key(&self.edges[i]) == key));
            if let Some(slot) = pred {
                let old = slot.take().expect("some");
                if self.edges[old].plot_index < p {
                    let reason = if contradicts(&self.edges[old].object, &t.object, &config.antonyms) {
                        SupersedeReason::Contradicted
                    } else {
                        SupersedeReason::Refined
                    };
                    self.link(old, &t.id, reason, p, log);
                } else {
                    self.retire(old, p, log);
                }
            }
        }
        for old in prior.into_iter().flatten() {
            self.retire(old, p, log);
        }
    }

    /// Adds to the active set, linking close rewrites of earlier triples.
    fn merge_insert(&mut self, batch: &TripleBatch, config: &MergeConfig, log: &mut ChangeLog) {
        let p = batch.plot_index;
        for t in &batch.triples {
            let active = self.current_active(&batch.character);
            if let Some(&i) = active.iter().find(|&&i| same_content(&self.edges[i], t)) {
                log.unchanged.push(self.edges[i].id.clone());
                continue;
            }
            let key = merge_key(t);
            let pred = active.into_iter().find(|&i| {
                let e = &self.edges[i];
                e.plot_index < p && merge_key(e) == key && jaccard(&e.object, &t.object) >= config.jaccard_threshold
            });
            self.push_edge(t.clone(), log);
            if let Some(old) = pred {
                self.link(old, &t.id, SupersedeReason::Refined, p, log);
            }
        }
    }

    fn require(&self, character: &str) -> Result<(), KgError> {
        if self.nodes.contains_key(character) {
            Ok(())
        } else {
            Err(KgError::UnknownCharacter(character.to_string()))
        }
    }

    fn ended_at(&self) -> HashMap<&str, u32> {
        self.links
            .iter()
            .map(|l| (l.old_id.as_str(), l.plot_index))
            .chain(self.retirements.iter().map(|r| (r.id.as_str(), r.plot_index)))
            .collect()
    }

    /// Triples holding for `character` as of plot `t`, ordered by plot then
    /// insertion. Plots past the end clamp to the last plot.
    pub fn state_at(&self, character: &str, t: u32) -> Result<Vec<&MentalStateTriple>, KgError> {
        self.require(character)?;
        let ended = self.ended_at();
        let mut out: Vec<&MentalStateTriple> = self
            .edges
            .iter()
            .filter(|e| e.subject == character && e.plot_index <= t)
            .filter(|e| ended.get(e.id.as_str()).is_none_or(|&end| end > t))
            .collect();
        out.sort_by_key(|e| e.plot_index);
        Ok(out)
    }

    pub fn timeline(&self, character: &str, dimension: Option<Dimension>) -> Result<Vec<TimelineRecord>, KgError> {
        self.require(character)?;
        let ended = self.ended_at();
        let by_new: HashMap<&str, &SupersedeLink> = self.links.iter().map(|l| (l.new_id.as_str(), l)).collect();
        let mut out: Vec<TimelineRecord> = self
            .edges
            .iter()
            .filter(|e| e.subject == character && dimension.is_none_or(|d| e.dimension == d))
            .map(|e| TimelineRecord {
                plot_index: e.plot_index,
                triple: e.clone(),
                supersedes: by_new.get(e.id.as_str()).map(|l| (*l).clone()),
                ended_at: ended.get(e.id.as_str()).copied(),
            })
            .collect();
        out.sort_by_key(|r| r.plot_index);
        Ok(out)
    }

    /// Checks every structural invariant; the first failure is reported.
    pub fn verify_invariants(&self) -> Result<(), KgError> {
        let bad = |m: String| Err(KgError::Invariant(m));
        let mut seen: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for e in &self.edges {
            if !self.nodes.contains_key(&e.subject) {
                return bad(format!("edge {} has unregistered subject {}", e.id, e.subject));
            }
            if e.plot_index == 0 || e.plot_index > self.plot_count {
                return bad(format!("edge {} plot {} out of range", e.id, e.plot_index));
            }
            seen.entry(&e.subject).or_default().insert(e.plot_index);
        }
        for n in self.nodes.values() {
            if seen.get(n.name.as_str()).cloned().unwrap_or_default() != n.plots_seen {
                return bad(format!("plots_seen of {} disagrees with its edges", n.name));
            }
        }
        for l in &self.links {
            let (Some(old), Some(new)) = (self.edge(&l.old_id), self.edge(&l.new_id)) else {
                return bad(format!("dangling link {} -> {}", l.old_id, l.new_id));
            };
            if old.plot_index >= new.plot_index || new.plot_index != l.plot_index {
                return bad(format!("link {} -> {} is not time-increasing", l.old_id, l.new_id));
            }
            if old.status != TripleStatus::Superseded {
                return bad(format!("superseded edge {} not marked", l.old_id));
            }
            if new.supersedes.as_deref() != Some(l.old_id.as_str()) {
                return bad(format!("edge {} does not point back to {}", l.new_id, l.old_id));
            }
        }
        if !is_acyclic(&self.links) {
            return bad("supersede links contain a cycle".into());
        }
        Ok(())
    }

    fn rebuild_index(&mut self) {
        self.index = self.edges.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
    }

    /// JSONL: a header carrying a SHA-256 of everything after it, then nodes,
    /// edges, links and retirements.
    pub fn to_jsonl(&self) -> String {
        let mut body = String::new();
        let mut push = |r: &GraphRecord| {
            body.push_str(&serde_json::to_string(r).expect("record serializes"));
            body.push('\n');
        };
        self.nodes.values().for_each(|n| push(&GraphRecord::Node(n.clone())));
        self.edges.iter().for_each(|e| push(&GraphRecord::Edge(e.clone())));
        self.links.iter().for_each(|l| push(&GraphRecord::Link(l.clone())));
        self.retirements.iter().for_each(|r| push(&GraphRecord::Retirement(r.clone())));
        let header = GraphRecord::Header(Header {
            book_id: self.book_id.clone(),
            plot_count: self.plot_count,
            edge_count: self.edges.len(),
            sha256: sha256_hex(&body),
        });
        format!("{}\n{body}", serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn from_jsonl(text: &str) -> Result<Self, KgError> {
        let corrupt = |m: &str| KgError::CorruptGraphFile(m.to_string());
        let (head, body) = text.split_once('\n').ok_or_else(|| corrupt("missing header"))?;
        let Ok(GraphRecord::Header(h)) = serde_json::from_str(head) else {
            return Err(corrupt("first line is not a header"));
        };
        if sha256_hex(body) != h.sha256 {
            return Err(corrupt("integrity hash mismatch"));
        }
        let mut kg = TemporalKg::new(h.book_id, h.plot_count);
        for (i, line) in body.lines().enumerate() {
            let rec: GraphRecord =
                serde_json::from_str(line).map_err(|e| KgError::CorruptGraphFile(format!("line {}: {e}", i + 2)))?;
            match rec {
                GraphRecord::Header(_) => return Err(corrupt("repeated header")),
                GraphRecord::Node(n) => {
                    kg.nodes.insert(n.name.clone(), n);
                }
                GraphRecord::Edge(e) => kg.edges.push(e),
                GraphRecord::Link(l) => kg.links.push(l),
                GraphRecord::Retirement(r) => kg.retirements.push(r),
            }
        }
        if kg.edges.len() != h.edge_count {
            return Err(corrupt("edge count mismatch"));
        }
        kg.rebuild_index();
        Ok(kg)
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KgError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Tab-separated `source relation target plot` lines for graph viewers.
    /// The target column falls back to the object when no target is named.
    pub fn edge_list(&self) -> String {
        let clean = |s: &str| s.replace(['\t', '\n'], " ");
        let mut out = String::from("source\trelation\ttarget\tplot\n");
        for e in &self.edges {
            let target = e.target.as_deref().unwrap_or(&e.object);
            out.push_str(&format!("{}\t{}\t{}\t{}\n", clean(&e.subject), clean(&e.predicate_raw), clean(target), e.plot_index));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    book_id: String,
    plot_count: u32,
    edge_count: usize,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum GraphRecord {
    Header(Header),
    Node(CharacterNode),
    Edge(MentalStateTriple),
    Link(SupersedeLink),
    Retirement(Retirement),
}

/// Kahn's algorithm over the link relation.
pub fn is_acyclic(links: &[SupersedeLink]) -> bool {
    let mut indeg: HashMap<&str, usize> = HashMap::new();
    let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
    for l in links {
        indeg.entry(&l.old_id).or_insert(0);
        *indeg.entry(&l.new_id).or_insert(0) += 1;
        out.entry(&l.old_id).or_default().push(&l.new_id);
    }
    let mut queue: VecDeque<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    let mut visited = 0;
    while let Some(n) = queue.pop_front() {
        visited += 1;
        for &m in out.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(m).expect("counted");
            *d -= 1;
            if *d == 0 {
                queue.push_back(m);
            }
        }
    }
    visited == indeg.len()
}

/// Single writer, many readers: readers take an immutable snapshot that later
/// inserts never mutate.
#[derive(Debug)]
pub struct SharedKg {
    current: RwLock<Arc<TemporalKg>>,
}

impl SharedKg {
    pub fn new(kg: TemporalKg) -> Self {
        Self { current: RwLock::new(Arc::new(kg)) }
    }

    pub fn snapshot(&self) -> Arc<TemporalKg> {
        self.current.read().expect("kg lock").clone()
    }

    pub fn insert_batch(&self, batch: &TripleBatch, config: &MergeConfig) -> Result<ChangeLog, KgError> {
        let mut guard = self.current.write().expect("kg lock");
        let mut next = (**guard).clone();
        let log = next.insert_batch(batch, config)?;
        *guard = Arc::new(next);
        Ok(log)
    }

    pub fn into_inner(self) -> TemporalKg {
        let arc = self.current.into_inner().expect("kg lock");
        Arc::try_unwrap(arc).unwrap_or_else(|a| (*a).clone())
    }
}
