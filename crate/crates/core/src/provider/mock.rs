//! Deterministic offline providers.
//!
//! Every mock here is a pure function of its input: no clocks, no shared
//! mutable state, and bit-identical output across runs and platforms.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::template::ids;
use super::{ChatBackend, ChatRequest, EmbedBackend, EmbeddingVector, ProviderError, RerankBackend, Vars};
use crate::text::{identifier_tokens, word_tokens};

pub const HASH_EMBED_DIM: usize = 64;
pub const HASH_EMBED_TAG: &str = "hash-embed-64";
const HASH_EMBED_KEY: &[u8] = b"cramf-hash-embedder/v1";

/// Embeds text by hashing `(key, text, coordinate)` into each of 64
/// coordinates. Identical strings give identical vectors; distinct strings
/// give effectively independent ones.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    key: Vec<u8>,
    tag: String,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            key: HASH_EMBED_KEY.to_vec(),
            tag: HASH_EMBED_TAG.to_string(),
        }
    }
}

impl HashEmbedder {
    pub fn with_key(key: &[u8]) -> Self {
        HashEmbedder {
            key: key.to_vec(),
            tag: format!("{HASH_EMBED_TAG}:{}", hex::encode(key)),
        }
    }

    pub fn raw(&self, text: &str) -> Vec<f64> {
        (0..HASH_EMBED_DIM as u32)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(&self.key);
                h.update([0x1f]);
                h.update(text.as_bytes());
                h.update([0x1f]);
                h.update(i.to_le_bytes());
                let d = h.finalize();
                let bits = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
                // 53 high bits -> exact double in [0, 1), then [-1, 1)
                ((bits >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    pub fn vector(&self, text: &str) -> EmbeddingVector {
        EmbeddingVector::normalized(&self.raw(text), self.tag.clone())
            .expect("hash embedding is never all-zero")
    }
}

impl EmbedBackend for HashEmbedder {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.raw(t)).collect())
    }
}

/// Reranker scoring each candidate by cosine similarity of hash embeddings.
#[derive(Debug, Clone, Default)]
pub struct CosineReranker {
    embedder: HashEmbedder,
}

impl CosineReranker {
    pub fn new(embedder: HashEmbedder) -> Self {
        CosineReranker { embedder }
    }
}

impl RerankBackend for CosineReranker {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, ProviderError> {
        let q = self.embedder.vector(query);
        Ok(candidates
            .iter()
            .map(|c| q.dot(&self.embedder.vector(c)))
            .collect())
    }
}

type Rule = Box<dyn Fn(&Vars) -> Option<String> + Send + Sync>;

/// Chat mock answering from canned replies keyed by `(template, variables)`
/// and then from per-template rules, in insertion order. Unmatched requests
/// go to the fallback backend, or fail with [`ProviderError::Unscripted`].
#[derive(Default)]
pub struct ScriptedChat {
    exact: HashMap<String, String>,
    rules: Vec<(String, Rule)>,
    fallback: Option<Box<dyn ChatBackend>>,
}

impl std::fmt::Debug for ScriptedChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedChat")
            .field("exact", &self.exact.len())
            .field("rules", &self.rules.len())
            .field("fallback", &self.fallback.is_some())
            .finish()
    }
}

impl ScriptedChat {
    pub fn new() -> Self {
        ScriptedChat::default()
    }

    pub fn reply(mut self, template_id: &str, variables: Vars, text: impl Into<String>) -> Self {
        self.exact
            .insert(super::vars_key(template_id, &variables), text.into());
        self
    }

    pub fn rule(
        mut self,
        template_id: &str,
        rule: impl Fn(&Vars) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.rules.push((template_id.to_string(), Box::new(rule)));
        self
    }

    pub fn with_fallback(mut self, fallback: impl ChatBackend + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    /// Loads rules from a line-delimited script. Each line is
    /// `{"template": id, "when": {var: substring, ...}, "reply": text}`;
    /// a rule matches when every listed variable contains its substring.
    pub fn from_script(path: &Path) -> Result<Self, ProviderError> {
        #[derive(Deserialize)]
        struct Line {
            template: String,
            #[serde(default)]
            when: BTreeMap<String, String>,
            reply: String,
        }
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("script {}: {e}", path.display())))?;
        let mut chat = ScriptedChat::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() || raw.trim_start().starts_with("//") {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| {
                ProviderError::Config(format!("script {} line {}: {e}", path.display(), i + 1))
            })?;
            let Line {
                template,
                when,
                reply,
            } = line;
            chat = chat.rule(&template, move |vars| {
                when.iter()
                    .all(|(k, sub)| vars.get(k).is_some_and(|v| v.contains(sub.as_str())))
                    .then(|| reply.clone())
            });
        }
        Ok(chat)
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, prompt: &str, request: &ChatRequest) -> Result<String, ProviderError> {
        if let Some(text) = self.exact.get(&request.vars_key()) {
            return Ok(text.clone());
        }
        for (template, rule) in &self.rules {
            if *template == request.template_id {
                if let Some(text) = rule(&request.variables) {
                    return Ok(text);
                }
            }
        }
        match &self.fallback {
            Some(f) => f.complete(prompt, request),
            None => Err(ProviderError::Unscripted(format!(
                "template {:?} with vars {:?}",
                request.template_id, request.variables
            ))),
        }
    }
}

/// Template-aware deterministic chat used by the command line in mock mode.
/// It produces well-formed replies derived only from the request variables,
/// which is enough to drive every pipeline stage end to end.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicChat;

const STOPWORDS: &[&str] = &[
    "prove", "show", "that", "every", "there", "their", "which", "where", "these", "those",
    "always", "least", "either", "other", "given", "suppose", "assume", "then", "with", "from",
    "into", "each", "some", "have", "such", "what", "when", "about", "being", "among", "whose",
];

fn concept_from_identifier(identifier: &str) -> String {
    let last = identifier.rsplit('.').next().unwrap_or(identifier);
    identifier_tokens(last)
        .into_iter()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn camel(words: &[String]) -> String {
    words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i == 0 {
                w.clone()
            } else {
                let mut c = w.chars();
                match c.next() {
                    Some(f) => f.to_uppercase().chain(c).collect(),
                    None => String::new(),
                }
            }
        })
        .collect()
}

const BOILERPLATE: &[&str] = &["theorem", "stmt", "sorry", "true"];

/// Whether an identifier token of `code` (four letters or more) occurs as a
/// word of `statement`.
fn shares_token(code: &str, statement: &str) -> bool {
    let words = word_tokens(statement);
    code.split(|c: char| !(c.is_alphanumeric() || c == '.' || c == '_'))
        .flat_map(identifier_tokens)
        .map(|t| t.to_lowercase())
        .filter(|t| t.len() >= 4 && !BOILERPLATE.contains(&t.as_str()))
        .any(|t| words.contains(&t))
}

fn verdict_line(yes: bool) -> String {
    format!("VERDICT: {}", if yes { "yes" } else { "no" })
}

impl ChatBackend for HeuristicChat {
    fn complete(&self, _prompt: &str, request: &ChatRequest) -> Result<String, ProviderError> {
        let v = |k: &str| request.variables.get(k).map(String::as_str).unwrap_or("");
        let reply = match request.template_id.as_str() {
            ids::BACK_TRANSLATE => format!(
                "{} is the notion of {} defined in {}.",
                v("identifier"),
                concept_from_identifier(v("identifier")),
                v("module_path")
            ),
            ids::EXTRACT_CONCEPT => {
                let module = v("identifier");
                let name = concept_from_identifier(module);
                format!(
                    "NAME: {}\nDOMAIN: unknown\nEXPLANATION: {}",
                    if name.is_empty() { "concept".into() } else { name },
                    v("description").replace('\n', " ")
                )
            }
            ids::CLASSIFY_PROBLEM => "CLASS: explicit".to_string(),
            ids::REWRITE_PROBLEM => v("statement").to_string(),
            ids::EXTRACT_QUERY_CONCEPTS => {
                let mut picked: Vec<String> = Vec::new();
                for w in word_tokens(v("statement")) {
                    if w.len() >= 5 && !STOPWORDS.contains(&w.as_str()) && !picked.contains(&w) {
                        picked.push(w);
                    }
                    if picked.len() == 2 {
                        break;
                    }
                }
                if picked.is_empty() {
                    picked.push("statement".into());
                }
                picked
                    .iter()
                    .map(|c| format!("CONCEPT: {c}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            ids::INTERPRET_CONCEPT => format!(
                "The term {} as it is used in the statement: {}",
                v("concept"),
                v("statement").replace('\n', " ")
            ),
            ids::GENERATE_KEYWORDS => {
                let words = word_tokens(v("concept"));
                let mut kws = vec![camel(&words)];
                kws.extend(words.iter().cloned());
                kws.dedup();
                format!("KEYWORDS: {}", kws.join(", "))
            }
            ids::FORMALIZE => {
                let used = v("context")
                    .lines()
                    .find_map(|l| {
                        l.strip_prefix("[1] ")
                            .and_then(|r| r.split_whitespace().next())
                    })
                    .unwrap_or("True");
                format!("theorem stmt : {used} := by sorry")
            }
            ids::BACK_TRANSLATE_FORMAL => v("formal_code").to_string(),
            ids::JUDGE_CONSISTENCY => verdict_line(shares_token(v("back_translation"), v("statement"))),
            ids::JUDGE_STRONG_RELEVANCE => verdict_line(shares_token(v("identifier"), v("statement"))),
            ids::JUDGE_WEAK_RELEVANCE => "VERDICT: yes".to_string(),
            other => {
                return Err(ProviderError::Unscripted(format!(
                    "heuristic mock has no behaviour for template {other:?}"
                )))
            }
        };
        Ok(reply)
    }
}
