//! Pipeline configuration: one TOML file, `${VAR}` interpolation, relative
//! paths resolved against the file's directory.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Duration;

use crate::corpus::{CorpusFormat, FieldMap};
use crate::evalharness::{ContextMode, ContextOptions, EvalCondition, PromptVariant};
use crate::llmgate::{HttpConfig, RetryPolicy, SchedulerConfig, WireFormat};
use crate::tkg::MergeConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config references unset environment variable `{0}`")]
    UnsetVariable(String),
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

static VAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"));

/// Replaces `${NAME}` with the variable's value; `$${` escapes a literal.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for c in VAR.captures_iter(text) {
        let m = c.get(0).expect("group 0");
        let escaped = m.start() > 0 && text.as_bytes()[m.start() - 1] == b'$';
        if escaped {
            out.push_str(&text[last..m.start() - 1]);
            out.push_str(m.as_str());
        } else {
            out.push_str(&text[last..m.start()]);
            out.push_str(&lookup(&c[1]).ok_or_else(|| ConfigError::UnsetVariable(c[1].to_string()))?);
        }
        last = m.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every sampled step: option shuffles, review sampling, request seeds.
    pub seed: u64,
    /// Root for all artifacts.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub backend: BackendSection,
    #[serde(default)]
    pub templates: TemplateSection,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub kg: MergeConfig,
    #[serde(default)]
    pub qa: QaSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ft: FtSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    #[serde(default)]
    pub alias_dir: Option<PathBuf>,
    #[serde(default)]
    pub fields: FieldMap,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Coser
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(default)]
    pub replay_script: Option<PathBuf>,
    /// Answer for unmatched replay requests; unmatched requests fail when unset.
    #[serde(default)]
    pub replay_fallback: Option<String>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub http: Option<HttpSection>,
}

fn default_in_flight() -> usize {
    4
}

fn default_rpm() -> u32 {
    600
}

impl BackendSection {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            max_in_flight: self.max_in_flight,
            requests_per_minute: self.requests_per_minute,
            retry: self.retry.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSection {
    #[serde(default = "default_http_id")]
    pub id: String,
    pub endpoint: String,
    /// Variable holding the API key; the key itself never enters the config.
    pub auth_env_var: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub wire: WireFormat,
}

fn default_http_id() -> String {
    "http".into()
}

fn default_timeout() -> u64 {
    120
}

impl HttpSection {
    pub fn to_http_config(&self) -> HttpConfig {
        HttpConfig {
            id: self.id.clone(),
            endpoint: self.endpoint.clone(),
            auth_env_var: self.auth_env_var.clone(),
            wire: self.wire.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    /// Directory of `<name>.txt` overrides.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub model: String,
    /// Reject any triple with a validation violation instead of flagging it.
    pub strict: bool,
    /// Restrict extraction to these characters; all speakers when empty.
    pub focus_characters: BTreeSet<String>,
    /// Books to process, by id or title; all when empty.
    pub books: BTreeSet<String>,
    /// Fraction of extracted triples written to the audit sample.
    pub review_sample_rate: f64,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            strict: false,
            focus_characters: BTreeSet::new(),
            books: BTreeSet::new(),
            review_sample_rate: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub model: String,
    pub verify_model: String,
    pub max_attempts: u32,
    /// Fraction of LLM-verified questions exported for human review.
    pub review_sample_rate: f64,
}

impl Default for QaSection {
    fn default() -> Self {
        Self { model: "gpt-4o".into(), verify_model: "gpt-4o".into(), max_attempts: 3, review_sample_rate: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleSetting {
    On,
    Off,
    #[default]
    Both,
}

impl std::str::FromStr for TripleSetting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "both" => Ok(Self::Both),
            other => Err(format!("expected on, off or both, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSetting {
    Current,
    Extended,
    Both,
}

impl std::str::FromStr for ContextSetting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "current" => Ok(Self::Current),
            "extended" => Ok(Self::Extended),
            "both" => Ok(Self::Both),
            other => Err(format!("expected current, extended or both, got `{other}`")),
        }
    }
}

/// Expands context and triple settings into conditions in grid order.
pub fn conditions_for(context: ContextSetting, triples: TripleSetting) -> Vec<EvalCondition> {
    EvalCondition::grid()
        .into_iter()
        .filter(|c| match context {
            ContextSetting::Current => c.context == ContextMode::CurrentPlot,
            ContextSetting::Extended => c.context == ContextMode::CurrentPlusPrevSummaries,
            ContextSetting::Both => true,
        })
        .filter(|c| match triples {
            TripleSetting::On => c.triples,
            TripleSetting::Off => !c.triples,
            TripleSetting::Both => true,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub models: Vec<String>,
    pub context: ContextSetting,
    pub triples: TripleSetting,
    pub variant: PromptVariant,
    /// Number of preceding summaries kept under the extended context.
    pub window: Option<u32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            models: vec!["gpt-4o".into()],
            context: ContextSetting::Both,
            triples: TripleSetting::Both,
            variant: PromptVariant::Appendix,
            window: None,
        }
    }
}

impl EvalSection {
    pub fn conditions(&self) -> Vec<EvalCondition> {
        conditions_for(self.context, self.triples)
    }

    pub fn context_options(&self) -> ContextOptions {
        ContextOptions { variant: self.variant, window: self.window }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtSection {
    pub ood_books: BTreeSet<String>,
    pub waive_verification: bool,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, |k| std::env::var(k).ok())
    }

    /// Parses, interpolates, resolves relative paths against `base` and validates.
    pub fn parse(text: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let text = interpolate(text, env)?;
        let mut cfg: PipelineConfig = toml::from_str(&text)?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.path);
        self.corpus.alias_dir.as_mut().map(fix);
        self.backend.replay_script.as_mut().map(fix);
        self.backend.cache_dir.as_mut().map(fix);
        self.templates.dir.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match self.backend.kind {
            BackendKind::Replay if self.backend.replay_script.is_none() => {
                return bad("backend.kind = \"replay\" needs backend.replay_script");
            }
            BackendKind::Http if self.backend.http.is_none() => {
                return bad("backend.kind = \"http\" needs a [backend.http] table");
            }
            _ => {}
        }
        if self.backend.max_in_flight == 0 {
            return bad("backend.max_in_flight must be at least 1");
        }
        if self.backend.requests_per_minute == 0 {
            return bad("backend.requests_per_minute must be at least 1");
        }
        if self.backend.retry.max_attempts == 0 {
            return bad("backend.retry.max_attempts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.qa.review_sample_rate) {
            return bad("qa.review_sample_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.extract.review_sample_rate) {
            return bad("extract.review_sample_rate must lie in [0, 1]");
        }
        if self.qa.max_attempts == 0 {
            return bad("qa.max_attempts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.kg.jaccard_threshold) {
            return bad("kg.jaccard_threshold must lie in [0, 1]");
        }
        if self.eval.models.is_empty() {
            return bad("eval.models must name at least one model");
        }
        if self.eval.window == Some(0) {
            return bad("eval.window must be at least 1 when set");
        }
        Ok(())
    }

    /// Canonical serialization, hashed into run manifests.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
