//! Prompt templates with `{{name}}` placeholders.
//!
//! Built-in templates are compiled in; a directory of `<name>.txt` files can
//! override any subset of them.

use regex::Regex;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` has no value for placeholder `{placeholder}`")]
    MissingValue { template: String, placeholder: String },
    #[error("cannot read template override {path}: {source}")]
    Override { path: String, source: std::io::Error },
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{([a-z_]+)\}\}").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    body: String,
}

impl Template {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body: String = body.into();
        Self { name: name.into(), body: body.trim_end_matches('\n').to_string() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for c in PLACEHOLDER.captures_iter(&self.body) {
            let n = c.get(1).expect("group").as_str();
            if !seen.contains(&n) {
                seen.push(n);
            }
        }
        seen
    }

    /// Substitutes in a single pass, so values are never re-expanded.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        if let Some(missing) = self.placeholders().into_iter().find(|p| !values.iter().any(|(k, _)| k == p)) {
            return Err(TemplateError::MissingValue { template: self.name.clone(), placeholder: missing.to_string() });
        }
        Ok(PLACEHOLDER
            .replace_all(&self.body, |c: &regex::Captures| {
                let key = &c[1];
                values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.to_string()).expect("checked above")
            })
            .into_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub extraction: Template,
    pub question: Template,
    pub verify: Template,
    pub regenerate: Template,
    pub eval_appendix: Template,
    pub eval_answer_only: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            extraction: Template::new("extraction", include_str!("../assets/templates/extraction.txt")),
            question: Template::new("question", include_str!("../assets/templates/question.txt")),
            verify: Template::new("verify", include_str!("../assets/templates/verify.txt")),
            regenerate: Template::new("regenerate", include_str!("../assets/templates/regenerate.txt")),
            eval_appendix: Template::new("eval_appendix", include_str!("../assets/templates/eval_appendix.txt")),
            eval_answer_only: Template::new(
                "eval_answer_only",
                include_str!("../assets/templates/eval_answer_only.txt"),
            ),
        }
    }
}

impl TemplateSet {
    /// Built-ins, with any `<dir>/<name>.txt` replacing the template of that name.
    pub fn load(override_dir: Option<&Path>) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        let Some(dir) = override_dir else {
            return Ok(set);
        };
        for t in set.slots_mut() {
            let path = dir.join(format!("{}.txt", t.name));
            match std::fs::read_to_string(&path) {
                Ok(body) => *t = Template::new(t.name.clone(), body),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(TemplateError::Override { path: path.display().to_string(), source }),
            }
        }
        Ok(set)
    }

    fn slots_mut(&mut self) -> [&mut Template; 6] {
        [
            &mut self.extraction,
            &mut self.question,
            &mut self.verify,
            &mut self.regenerate,
            &mut self.eval_appendix,
            &mut self.eval_answer_only,
        ]
    }

    /// Template name to SHA-256 of its body, for run manifests.
    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut set = self.clone();
        set.slots_mut()
            .into_iter()
            .map(|t| (t.name.clone(), crate::util::sha256_hex(&t.body)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_render() {
        let t = Template::new("t", "a {{x}} b {{y}} {{x}}\n");
        assert_eq!(t.placeholders(), vec!["x", "y"]);
        assert_eq!(t.render(&[("x", "{{y}}"), ("y", "2")]).unwrap(), "a {{y}} b 2 {{y}}");
        assert!(matches!(t.render(&[("x", "1")]), Err(TemplateError::MissingValue { .. })));
    }

    #[test]
    fn literal_braces_survive() {
        let set = TemplateSet::default();
        assert!(set.eval_appendix.body().contains("{answer: X}"));
        assert!(set.extraction.placeholders().contains(&"previous_triples"));
    }

    #[test]
    fn directory_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("verify.txt"), "custom {{question}}").unwrap();
        let set = TemplateSet::load(Some(dir.path())).unwrap();
        assert_eq!(set.verify.body(), "custom {{question}}");
        assert_eq!(set.question, TemplateSet::default().question);
    }
}
