use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use super::{estimate_tokens, Backend, ChatRequest, ChatResponse, GateError};

/// What the replay backend answers when no entry matches.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayDefault {
    #[default]
    Error,
    Fixed(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    digest: Option<String>,
    prompt_pattern: Option<String>,
    response_text: String,
    #[serde(default)]
    #[allow(dead_code)]
    comment: Option<String>,
}

/// Scripted responses. Exact digest entries win over prompt patterns; patterns
/// are tried in file order against [`ChatRequest::prompt_text`].
#[derive(Debug, Clone, Default)]
pub struct ReplayScript {
    by_digest: HashMap<String, String>,
    patterns: Vec<(Regex, String)>,
    pub default: ReplayDefault,
}

impl ReplayScript {
    pub fn load(path: &Path) -> Result<Self, GateError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses the JSONL script format:
    /// `{"digest": ..., "response_text": ...}` or
    /// `{"prompt_pattern": ..., "response_text": ...}` per line.
    pub fn parse(text: &str) -> Result<Self, GateError> {
        let mut script = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: ScriptLine = serde_json::from_str(line)
                .map_err(|e| GateError::ScriptInvalid(format!("line {}: {e}", i + 1)))?;
            match (l.digest, l.prompt_pattern) {
                (Some(d), None) => script.insert_digest(d, l.response_text)?,
                (None, Some(p)) => script.insert_pattern(&p, l.response_text)?,
                _ => {
                    return Err(GateError::ScriptInvalid(format!(
                        "line {}: exactly one of `digest` or `prompt_pattern` is required",
                        i + 1
                    )))
                }
            }
        }
        Ok(script)
    }

    pub fn insert_digest(&mut self, digest: String, response: String) -> Result<(), GateError> {
        if self.by_digest.contains_key(&digest) {
            return Err(GateError::ScriptInvalid(format!("digest {digest} scripted twice")));
        }
        self.by_digest.insert(digest, response);
        Ok(())
    }

    pub fn insert_pattern(&mut self, pattern: &str, response: String) -> Result<(), GateError> {
        let re = Regex::new(pattern).map_err(|e| GateError::ScriptInvalid(e.to_string()))?;
        self.patterns.push((re, response));
        Ok(())
    }

    pub fn with_default(mut self, default: ReplayDefault) -> Self {
        self.default = default;
        self
    }

    pub fn lookup(&self, request: &ChatRequest) -> Result<&str, GateError> {
        let digest = request.digest();
        if let Some(r) = self.by_digest.get(&digest) {
            return Ok(r);
        }
        let prompt = request.prompt_text();
        if let Some((_, r)) = self.patterns.iter().find(|(re, _)| re.is_match(&prompt)) {
            return Ok(r);
        }
        match &self.default {
            ReplayDefault::Error => Err(GateError::ScriptMiss(digest)),
            ReplayDefault::Fixed(t) => Ok(t),
        }
    }

    pub fn len(&self) -> usize {
        self.by_digest.len() + self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBackend {
    script: ReplayScript,
}

impl ReplayBackend {
    pub const ID: &'static str = "replay";

    pub fn new(script: ReplayScript) -> Self {
        Self { script }
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        Self::ID
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GateError> {
        let text = self.script.lookup(request)?.to_string();
        Ok(ChatResponse {
            prompt_tokens: estimate_tokens(&request.prompt_text()),
            output_tokens: estimate_tokens(&text),
            text,
            backend_id: Self::ID.to_string(),
            cached: false,
        })
    }
}
