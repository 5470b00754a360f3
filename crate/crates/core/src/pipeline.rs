//! Stage orchestration over an artifact directory. Each stage reads its
//! upstream artifacts, writes its own and records a run manifest.
//!
//! ```text
//! <out>/corpus/<book>.jsonl
//! <out>/triples/{batches,triples,rejects}.jsonl, review_sample.csv
//! <out>/kg/<book>.kg.jsonl, <book>.edges.tsv
//! <out>/qa/questions.jsonl, verdicts.jsonl, generation_errors.jsonl, review.csv
//! <out>/eval/predictions.jsonl, scores.json, report.txt
//! <out>/ft/<split>.<with_triples|no_triples>.jsonl, split.json
//! <out>/manifests/<command>.json
//! ```

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{BackendKind, ConfigError, PipelineConfig, TripleSetting};
use crate::corpus::{self, Corpus, CorpusError, CorpusFormat, IngestOptions, Plot};
use crate::evalharness::{self, EvalCondition, EvalError, EvalInputs, ReportLayout, ScoreTable};
use crate::ftemit::{self, EmitOptions, FtError, Split, SplitSpec};
use crate::llmgate::{
    Backend, GateError, Gateway, HttpBackend, ReplayBackend, ReplayDefault, ReplayScript, ResponseCache,
};
use crate::manifest::{display_rel, RunManifest};
use crate::qagen::{self, QaError, QuestionState, TomQuestion, VerificationVerdict};
use crate::templates::{TemplateError, TemplateSet};
use crate::tkg::{KgError, TemporalKg};
use crate::triples::{self, BatchContext, MentalStateTriple, RejectedTriple, TripleBatch, TripleError, ValidationPolicy};
use crate::util::{self, sha256_hex};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing upstream artifact {path}; run `{stage}` first")]
    MissingUpstreamArtifact { path: String, stage: &'static str },
    #[error("malformed artifact {path}: {reason}")]
    MalformedArtifact { path: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Triple(#[from] TripleError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ft(#[from] FtError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// True when the failure came from the model backend rather than input.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            PipelineError::Gate(e) => !matches!(e, GateError::ScriptInvalid(_)),
            PipelineError::Qa(QaError::Gate(_)) => true,
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Outcome of one stage: a human summary plus how many items failed at the
/// backend. Failed items are recorded in the stage's artifacts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageReport {
    pub summary: String,
    pub backend_failures: usize,
    /// Non-fatal input problems, e.g. bad review rows.
    pub user_errors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn batches(&self) -> PathBuf {
        self.root.join("triples/batches.jsonl")
    }
    pub fn triples(&self) -> PathBuf {
        self.root.join("triples/triples.jsonl")
    }
    pub fn rejects(&self) -> PathBuf {
        self.root.join("triples/rejects.jsonl")
    }
    pub fn triple_review(&self) -> PathBuf {
        self.root.join("triples/review_sample.csv")
    }
    pub fn kg_dir(&self) -> PathBuf {
        self.root.join("kg")
    }
    pub fn kg(&self, book: &str) -> PathBuf {
        self.kg_dir().join(format!("{book}.kg.jsonl"))
    }
    pub fn edges(&self, book: &str) -> PathBuf {
        self.kg_dir().join(format!("{book}.edges.tsv"))
    }
    pub fn questions(&self) -> PathBuf {
        self.root.join("qa/questions.jsonl")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.root.join("qa/verdicts.jsonl")
    }
    pub fn generation_errors(&self) -> PathBuf {
        self.root.join("qa/generation_errors.jsonl")
    }
    pub fn review(&self) -> PathBuf {
        self.root.join("qa/review.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("eval/predictions.jsonl")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("eval/scores.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("eval/report.txt")
    }
    pub fn ft_dir(&self) -> PathBuf {
        self.root.join("ft")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

/// A failed generation item, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub book_id: String,
    pub plot_index: u32,
    pub character: String,
    pub error: String,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    /// Directory of the config file; manifest input paths are relative to it.
    pub base: PathBuf,
    pub config_sha256: String,
    pub templates: TemplateSet,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            PipelineError::MissingUpstreamArtifact { path: path.display().to_string(), stage }
        }
        _ => PipelineError::Io { path: path.display().to_string(), source: e },
    })?;
    util::from_jsonl(&text).map_err(|(line, e)| PipelineError::MalformedArtifact {
        path: path.display().to_string(),
        reason: format!("line {line}: {e}"),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let text = util::to_jsonl(items)
        .map_err(|e| PipelineError::MalformedArtifact { path: path.display().to_string(), reason: e.to_string() })?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    util::write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// Characters to process in a plot: speakers, narrowed to the focus set when
/// one is configured, in name order.
fn plot_characters<'a>(plot: &'a Plot, focus: &BTreeSet<String>) -> Vec<&'a str> {
    plot.speakers().into_iter().filter(|c| focus.is_empty() || focus.contains(*c)).collect()
}

fn state_lines(kg: &TemporalKg, character: &str, t: u32) -> Result<Vec<MentalStateTriple>, KgError> {
    if t == 0 || kg.node(character).is_none() {
        return Ok(Vec::new());
    }
    Ok(kg.state_at(character, t)?.into_iter().cloned().collect())
}

impl Pipeline {
    pub fn from_config_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let config = PipelineConfig::parse(&text, &base, |k| std::env::var(k).ok())?;
        Self::new(config, base, &text)
    }

    pub fn new(config: PipelineConfig, base: PathBuf, config_text: &str) -> Result<Self, PipelineError> {
        let templates = TemplateSet::load(config.templates.dir.as_deref())?;
        Ok(Self { config, base, config_sha256: sha256_hex(config_text), templates })
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.config.out_dir.clone() }
    }

    fn seed(&self) -> Option<u64> {
        Some(self.config.seed)
    }

    /// Builds the configured backend behind a scheduler and optional cache.
    pub fn gateway(&self) -> Result<Gateway, PipelineError> {
        let b = &self.config.backend;
        let backend: Arc<dyn Backend> = match b.kind {
            BackendKind::Replay => {
                let path = b.replay_script.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("backend.kind = \"replay\" needs backend.replay_script".into())
                })?;
                let default = b.replay_fallback.clone().map_or(ReplayDefault::Error, ReplayDefault::Fixed);
                Arc::new(ReplayBackend::new(ReplayScript::load(path)?.with_default(default)))
            }
            BackendKind::Http => {
                let http = b.http.as_ref().ok_or_else(|| ConfigError::Invalid("missing [backend.http]".into()))?;
                let backend = HttpBackend::new(http.to_http_config());
                backend.check_auth()?;
                Arc::new(backend)
            }
        };
        let mut gate = Gateway::new(backend, &b.scheduler())?;
        if let Some(dir) = &b.cache_dir {
            gate = gate.with_cache(ResponseCache::new(dir));
        }
        Ok(gate)
    }

    fn manifest(&self, command: &str, gate: Option<&Gateway>) -> RunManifest {
        let mut m = RunManifest::new(command, self.config.seed, &self.config_sha256);
        m.backend = gate.map(|g| g.backend_id().to_string());
        if gate.is_some() {
            m.templates = self.templates.fingerprints();
        }
        m
    }

    fn rel(&self, p: &Path) -> String {
        display_rel(p, &self.config.out_dir)
    }

    fn finish(&self, m: &mut RunManifest, outputs: &[PathBuf]) -> Result<(), PipelineError> {
        let root = &self.config.out_dir;
        for o in outputs {
            if o.exists() {
                m.output(o, root).map_err(io_err(o))?;
            }
        }
        let path = self.layout().manifest(&m.command);
        m.write(&path).map_err(io_err(&path))
    }

    fn record_inputs(&self, m: &mut RunManifest, inputs: &[PathBuf]) -> Result<(), PipelineError> {
        for i in inputs {
            if i.exists() {
                let base = if i.starts_with(&self.config.out_dir) { &self.config.out_dir } else { &self.base };
                m.input(i, base).map_err(io_err(i))?;
            }
        }
        Ok(())
    }

    fn ingest_options(&self) -> IngestOptions {
        IngestOptions { fields: self.config.corpus.fields.clone(), alias_dir: self.config.corpus.alias_dir.clone() }
    }

    // ---------------------------------------------------------------- ingest

    pub fn ingest(&self) -> Result<StageReport, PipelineError> {
        let c = &self.config.corpus;
        let corpus = corpus::ingest_corpus(&c.path, c.format, &self.ingest_options())?;
        let dir = self.layout().corpus_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        corpus.write_normalized(&dir)?;
        let mut m = self.manifest("ingest", None);
        let mut inputs = vec![c.path.clone()];
        inputs.extend(c.alias_dir.clone());
        self.record_inputs(&mut m, &inputs)?;
        let stats = corpus::corpus_stats(&corpus);
        m.count("books", corpus.books.len());
        m.count("plots", stats.total.plots);
        m.count("conversations", stats.total.conversations);
        self.finish(&mut m, &[dir])?;
        Ok(StageReport {
            summary: format!(
                "ingested {} book(s), {} plot(s), {} conversation(s)",
                corpus.books.len(),
                stats.total.plots,
                stats.total.conversations
            ),
            ..Default::default()
        })
    }

    /// The normalized corpus written by `ingest`.
    pub fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        let dir = self.layout().corpus_dir();
        if !dir.is_dir() {
            return Err(PipelineError::MissingUpstreamArtifact { path: dir.display().to_string(), stage: "ingest" });
        }
        Ok(corpus::ingest_corpus(&dir, CorpusFormat::Normalized, &self.ingest_options())?)
    }

    fn selected_books<'a>(&self, corpus: &'a Corpus) -> Result<Vec<&'a corpus::Book>, PipelineError> {
        let wanted = &self.config.extract.books;
        if wanted.is_empty() {
            return Ok(corpus.books.iter().collect());
        }
        let mut out = Vec::new();
        for name in wanted {
            let b = corpus.find_book(name).ok_or_else(|| {
                ConfigError::Invalid(format!("extract.books names `{name}`, which is not in the corpus"))
            })?;
            out.push(b);
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out.dedup_by(|a, b| a.id == b.id);
        Ok(out)
    }

    // --------------------------------------------------------------- extract

    /// Extracts triples plot by plot. Each character's request carries its
    /// state after the previous plot, taken from a graph built as the run
    /// proceeds; requests within a plot run in parallel.
    pub fn extract(&self, gate: &Gateway) -> Result<StageReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let ex = &self.config.extract;
        let policy = ValidationPolicy { strict: ex.strict };
        let mut batches: Vec<TripleBatch> = Vec::new();
        let mut rejects: Vec<RejectedTriple> = Vec::new();
        let mut failures = 0usize;
        for book in self.selected_books(&corpus)? {
            let registry = corpus.registries.get(&book.id);
            let mut kg = TemporalKg::new(&book.id, book.plot_count());
            for plot in &book.plots {
                let chars = plot_characters(plot, &ex.focus_characters);
                let mut items = Vec::new();
                for ch in &chars {
                    let prev = state_lines(&kg, ch, plot.index - 1)?;
                    let req = triples::build_extraction_prompt(
                        &self.templates.extraction,
                        plot,
                        ch,
                        &prev,
                        &ex.model,
                        self.seed(),
                    )?;
                    items.push((ch.to_string(), req));
                }
                for (ch, result) in gate.execute_batch(&items) {
                    let reject = |entry: String, reason: String| RejectedTriple {
                        book_id: book.id.clone(),
                        character: ch.clone(),
                        plot_index: plot.index,
                        entry,
                        reason,
                    };
                    let resp = match result {
                        Ok(r) => r,
                        Err(e) => {
                            log::warn!("{} plot {} {ch}: {e}", book.id, plot.index);
                            failures += 1;
                            rejects.push(reject(String::new(), format!("request failed: {e}")));
                            continue;
                        }
                    };
                    let parsed = match triples::parse_triple_response(&resp.text) {
                        Ok(p) => p,
                        Err(e) => {
                            rejects.push(reject(resp.text.clone(), e.to_string()));
                            continue;
                        }
                    };
                    let ctx = BatchContext { book_id: &book.id, character: &ch, plot, registry, policy };
                    let (batch, rej) = triples::assemble_batch(&ctx, &parsed, &resp.text);
                    rejects.extend(rej);
                    kg.insert_batch(&batch, &self.config.kg)?;
                    batches.push(batch);
                }
            }
        }
        let layout = self.layout();
        let all_triples: Vec<&MentalStateTriple> = batches.iter().flat_map(|b| &b.triples).collect();
        write_jsonl(&layout.batches(), &batches)?;
        write_jsonl(&layout.triples(), &all_triples)?;
        write_jsonl(&layout.rejects(), &rejects)?;
        let review = self.triple_review_csv(&all_triples)?;
        write_text(&layout.triple_review(), &review)?;

        let mut m = self.manifest("extract", Some(gate));
        self.record_inputs(&mut m, &[layout.corpus_dir()])?;
        m.setting("model", &ex.model);
        m.setting("strict", ex.strict);
        m.count("batches", batches.len());
        m.count("triples", all_triples.len());
        m.count("rejects", rejects.len());
        m.count("failed_requests", failures);
        self.finish(&mut m, &[layout.batches(), layout.triples(), layout.rejects(), layout.triple_review()])?;
        Ok(StageReport {
            summary: format!(
                "{} batch(es), {} triple(s), {} rejected entr(ies), {} failed request(s)",
                batches.len(),
                all_triples.len(),
                rejects.len(),
                failures
            ),
            backend_failures: failures,
            ..Default::default()
        })
    }

    /// A seeded sample of extracted triples for manual audit.
    fn triple_review_csv(&self, all: &[&MentalStateTriple]) -> Result<String, PipelineError> {
        let sampled = qagen::sample(all.iter().copied(), self.config.extract.review_sample_rate, self.config.seed, |t| &t.id);
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| PipelineError::from(QaError::Csv(e));
        w.write_record(["id", "book_id", "plot_index", "subject", "predicate", "object", "dimension", "violations", "verdict", "notes"])
            .map_err(csv_err)?;
        for t in sampled {
            let violations: Vec<String> = t.violations.iter().map(|v| format!("{v:?}")).collect();
            w.write_record([
                t.id.as_str(),
                &t.book_id,
                &t.plot_index.to_string(),
                &t.subject,
                &t.predicate_raw,
                &t.object,
                t.dimension.as_str(),
                &violations.join(";"),
                "",
                "",
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| csv_err(csv::Error::from(e.into_error())))?;
        Ok(String::from_utf8(bytes).expect("utf-8 fields"))
    }

    // -------------------------------------------------------------- build-kg

    pub fn build_kg(&self) -> Result<StageReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let layout = self.layout();
        let batches: Vec<TripleBatch> = read_jsonl(&layout.batches(), "extract")?;
        let mut graphs: BTreeMap<String, TemporalKg> = BTreeMap::new();
        for b in &batches {
            let kg = match graphs.get_mut(&b.book_id) {
                Some(kg) => kg,
                None => {
                    let book = corpus.book(&b.book_id).ok_or_else(|| PipelineError::MalformedArtifact {
                        path: layout.batches().display().to_string(),
                        reason: format!("book `{}` is not in the corpus", b.book_id),
                    })?;
                    graphs.entry(b.book_id.clone()).or_insert_with(|| TemporalKg::new(&book.id, book.plot_count()))
                }
            };
            kg.insert_batch(b, &self.config.kg)?;
        }
        let dir = layout.kg_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let mut m = self.manifest("build-kg", None);
        m.setting("merge_mode", format!("{:?}", self.config.kg.mode));
        m.setting("jaccard_threshold", self.config.kg.jaccard_threshold);
        let mut lines = Vec::new();
        for (book, kg) in &graphs {
            kg.verify_invariants()?;
            kg.save(&layout.kg(book))?;
            write_text(&layout.edges(book), &kg.edge_list())?;
            m.count(&format!("{book}.edges"), kg.edges().len());
            m.count(&format!("{book}.links"), kg.links().len());
            m.count(&format!("{book}.retirements"), kg.retirements().len());
            lines.push(format!(
                "{book}: {} edge(s), {} supersede link(s), {} retirement(s)",
                kg.edges().len(),
                kg.links().len(),
                kg.retirements().len()
            ));
        }
        self.record_inputs(&mut m, &[layout.batches()])?;
        self.finish(&mut m, &[dir])?;
        if lines.is_empty() {
            lines.push("no batches; no graphs written".into());
        }
        Ok(StageReport { summary: lines.join("\n"), ..Default::default() })
    }

    /// Loads graphs for the given books. A missing file is an error only
    /// when `required`.
    pub fn load_kgs<'a>(
        &self,
        books: impl IntoIterator<Item = &'a str>,
        required: bool,
    ) -> Result<BTreeMap<String, TemporalKg>, PipelineError> {
        let layout = self.layout();
        let mut out = BTreeMap::new();
        for b in books {
            let path = layout.kg(b);
            if !path.exists() {
                if required {
                    return Err(PipelineError::MissingUpstreamArtifact {
                        path: path.display().to_string(),
                        stage: "build-kg",
                    });
                }
                continue;
            }
            out.insert(b.to_string(), TemporalKg::load(&path)?);
        }
        Ok(out)
    }

    // ----------------------------------------------------------------- genqa

    pub fn genqa(&self, gate: &Gateway) -> Result<StageReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let books = self.selected_books(&corpus)?;
        let kgs = self.load_kgs(books.iter().map(|b| b.id.as_str()), true)?;
        let qa = &self.config.qa;
        let focus = &self.config.extract.focus_characters;
        let mut items = Vec::new();
        for book in &books {
            let kg = &kgs[&book.id];
            for plot in &book.plots {
                for ch in plot_characters(plot, focus) {
                    let triples = state_lines(kg, ch, plot.index)?;
                    let req = qagen::build_question_prompt(
                        &self.templates.question,
                        plot,
                        ch,
                        &triples,
                        &qa.model,
                        self.seed(),
                    )?;
                    items.push(((book.id.clone(), plot.index, ch.to_string()), req));
                }
            }
        }
        let mut questions = Vec::new();
        let mut failures = Vec::new();
        let mut backend_failures = 0;
        for ((book_id, plot_index, character), result) in gate.execute_batch(&items) {
            let parsed = result
                .map_err(|e| {
                    backend_failures += 1;
                    QaError::Gate(e)
                })
                .and_then(|r| qagen::parse_question_response(&r.text));
            match parsed {
                Ok(drafts) => questions.extend(
                    drafts
                        .into_iter()
                        .map(|d| qagen::finalize(d, &book_id, plot_index, &character, 1, self.config.seed)),
                ),
                Err(e) => {
                    log::warn!("{book_id} plot {plot_index} {character}: {e}");
                    failures.push(GenerationFailure { book_id, plot_index, character, error: e.to_string() });
                }
            }
        }
        questions.sort_by(|a, b| (&a.book_id, a.plot_index, &a.id).cmp(&(&b.book_id, b.plot_index, &b.id)));
        let layout = self.layout();
        write_jsonl(&layout.questions(), &questions)?;
        write_jsonl(&layout.generation_errors(), &failures)?;
        write_text(&layout.verdicts(), "")?;

        let mut m = self.manifest("genqa", Some(gate));
        let mut inputs = vec![layout.corpus_dir()];
        inputs.extend(books.iter().map(|b| layout.kg(&b.id)));
        self.record_inputs(&mut m, &inputs)?;
        m.setting("model", &qa.model);
        m.count("questions", questions.len());
        m.count("failed_items", failures.len());
        self.finish(&mut m, &[layout.questions(), layout.generation_errors(), layout.verdicts()])?;
        Ok(StageReport {
            summary: format!("{} question(s), {} failed item(s)", questions.len(), failures.len()),
            backend_failures,
            ..Default::default()
        })
    }

    pub fn load_questions(&self) -> Result<Vec<TomQuestion>, PipelineError> {
        let path = self.layout().questions();
        let qs: Vec<TomQuestion> = read_jsonl(&path, "genqa")?;
        for q in &qs {
            q.check_invariants().map_err(|e| PipelineError::MalformedArtifact {
                path: path.display().to_string(),
                reason: format!("{}: {e}", q.id),
            })?;
        }
        Ok(qs)
    }

    fn load_verdicts(&self) -> Result<Vec<VerificationVerdict>, PipelineError> {
        let path = self.layout().verdicts();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path, "genqa")
    }

    // ---------------------------------------------------------------- verify

    /// LLM review of every Generated question, regenerating rejected ones
    /// until they pass or run out of attempts.
    pub fn verify(&self, gate: &Gateway) -> Result<StageReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let mut questions = self.load_questions()?;
        let mut verdicts = self.load_verdicts()?;
        let books: BTreeSet<&str> = questions.iter().map(|q| q.book_id.as_str()).collect();
        let kgs = self.load_kgs(books.iter().copied(), false)?;
        let qa = &self.config.qa;
        let plot_of = |q: &TomQuestion| {
            corpus.plot(&q.book_id, q.plot_index).ok_or_else(|| PipelineError::MalformedArtifact {
                path: self.layout().questions().display().to_string(),
                reason: format!("{} refers to a missing plot", q.id),
            })
        };
        let mut backend_failures = 0;
        let mut exhausted = 0;
        // Questions that could not be served this run stay where they are.
        let mut stuck: BTreeSet<String> = BTreeSet::new();
        loop {
            let mut items = Vec::new();
            for (i, q) in questions.iter().enumerate() {
                if q.state == QuestionState::Generated && !stuck.contains(&q.id) {
                    let req = qagen::verification_request(&self.templates.verify, q, plot_of(q)?, &qa.verify_model, self.seed())?;
                    items.push((i, req));
                }
            }
            if items.is_empty() {
                break;
            }
            for (i, result) in gate.execute_batch(&items) {
                match result {
                    Ok(r) => verdicts.push(qagen::apply_llm_verdict(&mut questions[i], &r.text)?),
                    Err(e) => {
                        log::warn!("verify {}: {e}", questions[i].id);
                        backend_failures += 1;
                        stuck.insert(questions[i].id.clone());
                    }
                }
            }
            let mut regen = Vec::new();
            for (i, q) in questions.iter().enumerate() {
                if q.state != QuestionState::Rejected || stuck.contains(&q.id) {
                    continue;
                }
                if q.attempt >= qa.max_attempts {
                    continue;
                }
                let triples = match kgs.get(&q.book_id) {
                    Some(kg) => state_lines(kg, &q.character, q.plot_index)?,
                    None => Vec::new(),
                };
                let req = qagen::regeneration_request(
                    (&self.templates.question, &self.templates.regenerate),
                    q,
                    plot_of(q)?,
                    &triples,
                    qa.max_attempts,
                    &qa.model,
                    self.seed(),
                )?;
                regen.push((i, req));
            }
            for (i, result) in gate.execute_batch(&regen) {
                let outcome = result
                    .map_err(|e| {
                        backend_failures += 1;
                        QaError::Gate(e)
                    })
                    .and_then(|r| qagen::apply_regeneration(&mut questions[i], &r.text, self.config.seed));
                if let Err(e) = outcome {
                    log::warn!("regenerate {}: {e}", questions[i].id);
                    stuck.insert(questions[i].id.clone());
                }
            }
        }
        for q in &questions {
            if q.state == QuestionState::Rejected && q.attempt >= qa.max_attempts {
                exhausted += 1;
            }
        }
        let layout = self.layout();
        write_jsonl(&layout.questions(), &questions)?;
        write_jsonl(&layout.verdicts(), &verdicts)?;
        let (pass, total) = qagen::first_pass_rate(&verdicts);
        let count = |s: QuestionState| questions.iter().filter(|q| q.state == s).count();

        let mut m = self.manifest("verify", Some(gate));
        self.record_inputs(&mut m, &[layout.corpus_dir()])?;
        m.setting("verify_model", &qa.verify_model);
        m.setting("max_attempts", qa.max_attempts);
        m.count("llm_verified", count(QuestionState::LlmVerified));
        m.count("rejected", count(QuestionState::Rejected));
        m.count("first_pass", pass);
        m.count("first_pass_total", total);
        self.finish(&mut m, &[layout.questions(), layout.verdicts()])?;
        Ok(StageReport {
            summary: format!(
                "{} verified, {} rejected ({} out of attempts), {} still generated; first-pass {}/{} ({}%)",
                count(QuestionState::LlmVerified) + count(QuestionState::HumanVerified),
                count(QuestionState::Rejected),
                exhausted,
                count(QuestionState::Generated),
                pass,
                total,
                if total == 0 { "-".into() } else { util::format_ratio_2dp(100 * pass, total) }
            ),
            backend_failures,
            ..Default::default()
        })
    }

    // --------------------------------------------------------- human review

    pub fn review_export(&self, out: Option<&Path>) -> Result<StageReport, PipelineError> {
        let questions = self.load_questions()?;
        let csv = qagen::export_review(&questions, self.config.qa.review_sample_rate, self.config.seed)?;
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| self.layout().review());
        write_text(&path, &csv)?;
        let rows = csv.lines().count().saturating_sub(1);
        let mut m = self.manifest("review-export", None);
        self.record_inputs(&mut m, &[self.layout().questions()])?;
        m.setting("sample_rate", self.config.qa.review_sample_rate);
        m.count("rows", rows);
        self.finish(&mut m, std::slice::from_ref(&path))?;
        Ok(StageReport { summary: format!("{rows} question(s) exported to {}", path.display()), ..Default::default() })
    }

    pub fn review_import(&self, path: &Path) -> Result<StageReport, PipelineError> {
        let mut questions = self.load_questions()?;
        let mut verdicts = self.load_verdicts()?;
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let report = qagen::import_review(&text, &mut questions)?;
        verdicts.extend(report.applied.iter().cloned());
        let layout = self.layout();
        write_jsonl(&layout.questions(), &questions)?;
        write_jsonl(&layout.verdicts(), &verdicts)?;
        let mut m = self.manifest("review-import", None);
        m.input(path, &self.base).map_err(io_err(path))?;
        m.count("applied", report.applied.len());
        m.count("blank", report.skipped_blank);
        m.count("errors", report.errors.len());
        self.finish(&mut m, &[layout.questions(), layout.verdicts()])?;
        let passed = report.applied.iter().filter(|v| v.pass).count();
        Ok(StageReport {
            summary: format!(
                "{} verdict(s) applied ({} pass, {} fail), {} blank row(s), {} error(s)",
                report.applied.len(),
                passed,
                report.applied.len() - passed,
                report.skipped_blank,
                report.errors.len()
            ),
            user_errors: report.errors.iter().map(|e| e.to_string()).collect(),
            ..Default::default()
        })
    }

    // ------------------------------------------------------------------ eval

    /// Questions enter evaluation unless rejected.
    pub fn eval(&self, gate: &Gateway, conditions: &[EvalCondition]) -> Result<StageReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let questions: Vec<TomQuestion> =
            self.load_questions()?.into_iter().filter(|q| q.state != QuestionState::Rejected).collect();
        let books: BTreeSet<&str> = questions.iter().map(|q| q.book_id.as_str()).collect();
        let needs_kg = conditions.iter().any(|c| c.triples);
        let kgs = self.load_kgs(books.iter().copied(), needs_kg)?;
        let ev = &self.config.eval;
        let inputs = EvalInputs {
            templates: &self.templates,
            corpus: &corpus,
            kgs: &kgs,
            questions: &questions,
            models: &ev.models,
            conditions,
            options: ev.context_options(),
            seed: self.seed(),
        };
        let run = evalharness::run_eval(gate, &inputs)?;
        let layout = self.layout();
        write_jsonl(&layout.predictions(), &run.predictions)?;
        let scores = serde_json::to_string_pretty(&run.table).expect("scores serialize") + "\n";
        write_text(&layout.scores(), &scores)?;
        let report = evalharness::render_report(&run.table, ReportLayout::Plain);
        write_text(&layout.report(), &report)?;

        let failures = run.predictions.iter().filter(|p| p.error.is_some()).count();
        let unparseable = run.predictions.iter().filter(|p| p.letter.is_none()).count();
        let mut m = self.manifest("eval", Some(gate));
        let mut ins = vec![layout.corpus_dir(), layout.questions()];
        ins.extend(kgs.keys().map(|b| layout.kg(b)));
        self.record_inputs(&mut m, &ins)?;
        m.setting("models", ev.models.join(","));
        m.setting("conditions", conditions.iter().map(|c| c.label()).collect::<Vec<_>>().join(","));
        m.setting("variant", format!("{:?}", ev.variant));
        if let Some(w) = ev.window {
            m.setting("window", w);
        }
        m.count("questions", questions.len());
        m.count("predictions", run.predictions.len());
        m.count("unparseable", unparseable);
        m.count("failed_requests", failures);
        self.finish(&mut m, &[layout.predictions(), layout.scores(), layout.report()])?;
        Ok(StageReport {
            summary: format!(
                "{} prediction(s) over {} question(s), {} unparseable, {} failed request(s)\n\n{}",
                run.predictions.len(),
                questions.len(),
                unparseable,
                failures,
                report.trim_end()
            ),
            backend_failures: failures,
            ..Default::default()
        })
    }

    pub fn load_scores(&self) -> Result<ScoreTable, PipelineError> {
        let path = self.layout().scores();
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                PipelineError::MissingUpstreamArtifact { path: path.display().to_string(), stage: "eval" }
            }
            _ => PipelineError::Io { path: path.display().to_string(), source: e },
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::MalformedArtifact { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn report(&self, layout: ReportLayout) -> Result<String, PipelineError> {
        Ok(evalharness::render_report(&self.load_scores()?, layout))
    }

    // --------------------------------------------------------------- emit-ft

    pub fn emit_ft(&self, triples: TripleSetting, waive: bool) -> Result<StageReport, PipelineError> {
        let corpus = self.load_corpus()?;
        let questions = self.load_questions()?;
        let spec = SplitSpec { ood_books: self.config.ft.ood_books.clone() };
        let split = ftemit::split_ood(&corpus, &questions, &spec)?;
        let waive = waive || self.config.ft.waive_verification;
        let variants: Vec<bool> = match triples {
            TripleSetting::On => vec![true],
            TripleSetting::Off => vec![false],
            TripleSetting::Both => vec![true, false],
        };
        let books: BTreeSet<&str> = questions.iter().map(|q| q.book_id.as_str()).collect();
        let kgs = self.load_kgs(books.iter().copied(), variants.contains(&true))?;
        let layout = self.layout();
        let dir = layout.ft_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let mut m = self.manifest("emit-ft", None);
        let mut lines = Vec::new();
        for with_triples in variants {
            let opts = EmitOptions { with_triples, waive_verification: waive };
            let examples = ftemit::emit_all(&self.templates, &corpus, &kgs, &questions, &split, opts)?;
            for s in [Split::Train, Split::OodTest] {
                let name = format!("{}.{}.jsonl", s.as_str(), if with_triples { "with_triples" } else { "no_triples" });
                let path = dir.join(&name);
                let n = ftemit::write_training_file(examples.iter().filter(|e| e.split == s), &path)?;
                m.count(&name, n);
                lines.push(format!("{}: {n} example(s)", self.rel(&path)));
            }
        }
        write_text(&dir.join("split.json"), &split.manifest_json()?)?;
        let mut ins = vec![layout.corpus_dir(), layout.questions()];
        ins.extend(kgs.keys().map(|b| layout.kg(b)));
        self.record_inputs(&mut m, &ins)?;
        m.setting("waive_verification", waive);
        self.finish(&mut m, &[dir])?;
        Ok(StageReport { summary: lines.join("\n"), ..Default::default() })
    }

    // ----------------------------------------------------------------- stats

    /// Corpus counts, plus question, verification and prompt-length figures
    /// when those artifacts exist. `subset` restricts the corpus table.
    pub fn stats(&self, subset: &BTreeSet<String>) -> Result<String, PipelineError> {
        let corpus = self.load_corpus()?;
        for name in subset {
            if corpus.find_book(name).is_none() {
                return Err(FtError::UnknownBook(name.clone()).into());
            }
        }
        let mut out = String::new();
        let report = if subset.is_empty() {
            corpus::corpus_stats(&corpus)
        } else {
            corpus::corpus_stats_subset(&corpus, subset)
        };
        out.push_str(&report.render());
        let qpath = self.layout().questions();
        if qpath.exists() {
            let questions = self.load_questions()?;
            out.push('\n');
            out.push_str(&qagen::dataset_stats(&questions).render());
            let (pass, total) = qagen::first_pass_rate(&self.load_verdicts()?);
            if total > 0 {
                out.push_str(&format!("First-pass valid\t{pass}/{total}\t{}%\n", util::format_ratio_2dp(100 * pass, total)));
            }
            let mut prompts = Vec::new();
            for q in &questions {
                let Some(book) = corpus.book(&q.book_id) else { continue };
                for c in EvalCondition::grid().into_iter().filter(|c| !c.triples) {
                    prompts.push(evalharness::assemble_context(
                        &self.templates,
                        q,
                        book,
                        None,
                        c,
                        self.config.eval.context_options(),
                    )?);
                }
            }
            for (ctx, (sum, n)) in evalharness::mean_prompt_tokens(&prompts) {
                out.push_str(&format!("Mean prompt tokens ({})\t{}\n", ctx.label(), util::format_ratio_2dp(sum, n)));
            }
        }
        Ok(out)
    }
}
