//! Prompt template catalog.
//!
//! Templates are plain text with `{{name}}` placeholders. The repository
//! ships a default set under `templates/`; a directory of `*.txt` files can
//! override or extend it at run time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::ProviderError;

pub mod ids {
    pub const BACK_TRANSLATE: &str = "back_translate";
    pub const EXTRACT_CONCEPT: &str = "extract_concept";
    pub const CLASSIFY_PROBLEM: &str = "classify_problem";
    pub const REWRITE_PROBLEM: &str = "rewrite_problem";
    pub const EXTRACT_QUERY_CONCEPTS: &str = "extract_query_concepts";
    pub const INTERPRET_CONCEPT: &str = "interpret_concept";
    pub const GENERATE_KEYWORDS: &str = "generate_keywords";
    pub const GROUNDING_CONTEXT: &str = "grounding_context";
    pub const GROUNDING_ENTRY: &str = "grounding_entry";
    pub const FORMALIZE: &str = "formalize";
    pub const BACK_TRANSLATE_FORMAL: &str = "back_translate_formal";
    pub const JUDGE_CONSISTENCY: &str = "judge_consistency";
    pub const JUDGE_STRONG_RELEVANCE: &str = "judge_strong_relevance";
    pub const JUDGE_WEAK_RELEVANCE: &str = "judge_weak_relevance";
}

const BUILTIN: &[(&str, &str)] = &[
    (ids::BACK_TRANSLATE, include_str!("../../templates/back_translate.txt")),
    (ids::EXTRACT_CONCEPT, include_str!("../../templates/extract_concept.txt")),
    (ids::CLASSIFY_PROBLEM, include_str!("../../templates/classify_problem.txt")),
    (ids::REWRITE_PROBLEM, include_str!("../../templates/rewrite_problem.txt")),
    (
        ids::EXTRACT_QUERY_CONCEPTS,
        include_str!("../../templates/extract_query_concepts.txt"),
    ),
    (ids::INTERPRET_CONCEPT, include_str!("../../templates/interpret_concept.txt")),
    (ids::GENERATE_KEYWORDS, include_str!("../../templates/generate_keywords.txt")),
    (ids::GROUNDING_CONTEXT, include_str!("../../templates/grounding_context.txt")),
    (ids::GROUNDING_ENTRY, include_str!("../../templates/grounding_entry.txt")),
    (ids::FORMALIZE, include_str!("../../templates/formalize.txt")),
    (
        ids::BACK_TRANSLATE_FORMAL,
        include_str!("../../templates/back_translate_formal.txt"),
    ),
    (ids::JUDGE_CONSISTENCY, include_str!("../../templates/judge_consistency.txt")),
    (
        ids::JUDGE_STRONG_RELEVANCE,
        include_str!("../../templates/judge_strong_relevance.txt"),
    ),
    (
        ids::JUDGE_WEAK_RELEVANCE,
        include_str!("../../templates/judge_weak_relevance.txt"),
    ),
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub text: String,
    pub placeholders: BTreeSet<String>,
}

impl Template {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let placeholders = placeholder_re()
            .captures_iter(&text)
            .map(|c| c[1].to_string())
            .collect();
        Template {
            id: id.into(),
            text,
            placeholders,
        }
    }

    /// Substitutes every placeholder. Extra variables are ignored; a missing
    /// one is a configuration error.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, ProviderError> {
        if let Some(missing) = self.placeholders.iter().find(|p| !vars.contains_key(*p)) {
            return Err(ProviderError::Config(format!(
                "template {:?} placeholder {{{{{missing}}}}} is unbound",
                self.id
            )));
        }
        let rendered = placeholder_re().replace_all(&self.text, |c: &regex::Captures<'_>| {
            vars[&c[1]].clone()
        });
        Ok(rendered.trim_end().to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateCatalog {
    templates: BTreeMap<String, Template>,
}

impl TemplateCatalog {
    pub fn builtin() -> Self {
        let mut cat = TemplateCatalog::default();
        for (id, text) in BUILTIN {
            cat.insert(Template::new(*id, *text));
        }
        cat
    }

    /// Builtin templates overridden by every `*.txt` file in `dir`; the file
    /// stem is the template id.
    pub fn builtin_with_overrides(dir: &Path) -> Result<Self, ProviderError> {
        let mut cat = TemplateCatalog::builtin();
        let entries = fs::read_dir(dir).map_err(|e| {
            ProviderError::Config(format!("template directory {}: {e}", dir.display()))
        })?;
        let mut paths: Vec<_> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let text = fs::read_to_string(&p)
                .map_err(|e| ProviderError::Config(format!("template {}: {e}", p.display())))?;
            cat.insert(Template::new(id, text));
        }
        Ok(cat)
    }

    pub fn insert(&mut self, template: Template) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&Template, ProviderError> {
        self.templates
            .get(id)
            .ok_or_else(|| ProviderError::Config(format!("unknown template {id:?}")))
    }

    pub fn render(&self, id: &str, vars: &BTreeMap<String, String>) -> Result<String, ProviderError> {
        self.get(id)?.render(vars)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn renders_and_reports_unbound() {
        let t = Template::new("t", "Hello {{name}}, {{ name }} and {{other}}!");
        assert_eq!(
            t.placeholders.iter().collect::<Vec<_>>(),
            vec!["name", "other"]
        );
        assert_eq!(
            t.render(&vars(&[("name", "A"), ("other", "B"), ("extra", "x")]))
                .unwrap(),
            "Hello A, A and B!"
        );
        assert!(matches!(
            t.render(&vars(&[("name", "A")])),
            Err(ProviderError::Config(_))
        ));
    }

    #[test]
    fn builtin_catalog_has_every_pipeline_template() {
        let cat = TemplateCatalog::builtin();
        for (id, _) in BUILTIN {
            assert!(cat.get(id).is_ok(), "{id}");
        }
        assert!(cat.get("nope").is_err());
        assert!(cat
            .get(ids::EXTRACT_CONCEPT)
            .unwrap()
            .placeholders
            .contains("retry_note"));
    }

    #[test]
    fn directory_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("formalize.txt"), "custom {{statement}}").unwrap();
        fs::write(dir.path().join("extra.txt"), "x").unwrap();
        let cat = TemplateCatalog::builtin_with_overrides(dir.path()).unwrap();
        assert_eq!(
            cat.render(ids::FORMALIZE, &vars(&[("statement", "s")])).unwrap(),
            "custom s"
        );
        assert!(cat.get("extra").is_ok());
        assert!(cat.get(ids::BACK_TRANSLATE).is_ok());
    }
}
