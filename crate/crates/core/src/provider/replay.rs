//! Provider traffic tape.
//!
//! Every gateway call can be recorded as a `(key, request, response)` line.
//! A tape loaded from disk then serves as a backend for all three provider
//! kinds, so a run can be re-executed without any live service.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, EmbedBackend, ProviderError, RerankBackend};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TapeEntry {
    Chat {
        key: String,
        request: ChatRequest,
        response: String,
    },
    Embed {
        key: String,
        model_tag: String,
        text: String,
        vector: Vec<f64>,
    },
    Rerank {
        key: String,
        query: String,
        candidates: Vec<String>,
        scores: Vec<f64>,
    },
}

impl TapeEntry {
    pub fn key(&self) -> &str {
        match self {
            TapeEntry::Chat { key, .. } | TapeEntry::Embed { key, .. } | TapeEntry::Rerank { key, .. } => key,
        }
    }
}

pub fn embed_key(model_tag: &str, text: &str) -> String {
    let canonical = serde_json::json!({"kind": "embed", "model": model_tag, "text": text});
    sha256_hex(canonical.to_string().as_bytes())
}

pub fn rerank_key(query: &str, candidates: &[String]) -> String {
    let canonical = serde_json::json!({"kind": "rerank", "query": query, "candidates": candidates});
    sha256_hex(canonical.to_string().as_bytes())
}

/// In-memory tape keyed by request hash.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Mutex<BTreeMap<String, TapeEntry>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("replay file {}: {e}", path.display())))?;
        let tape = Tape::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TapeEntry = serde_json::from_str(line).map_err(|e| {
                ProviderError::Config(format!("replay file {} line {}: {e}", path.display(), i + 1))
            })?;
            tape.record(entry);
        }
        Ok(tape)
    }

    pub fn record(&self, entry: TapeEntry) {
        self.entries.lock().insert(entry.key().to_string(), entry);
    }

    pub fn get(&self, key: &str) -> Option<TapeEntry> {
        self.entries.lock().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the tape sorted by key, one entry per line.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let entries = self.entries.lock();
        let mut out = String::new();
        for e in entries.values() {
            out.push_str(&serde_json::to_string(e).expect("tape entries serialize"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    fn embed_tag(&self) -> Option<String> {
        self.entries.lock().values().find_map(|e| match e {
            TapeEntry::Embed { model_tag, .. } => Some(model_tag.clone()),
            _ => None,
        })
    }
}

/// Backend answering every provider kind from a loaded tape.
#[derive(Debug)]
pub struct ReplayBackend {
    tape: std::sync::Arc<Tape>,
    model_tag: String,
}

impl ReplayBackend {
    pub fn new(tape: std::sync::Arc<Tape>) -> Self {
        let model_tag = tape.embed_tag().unwrap_or_else(|| "replay".to_string());
        ReplayBackend { tape, model_tag }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, _prompt: &str, request: &ChatRequest) -> Result<String, ProviderError> {
        let key = request.request_key();
        match self.tape.get(&key) {
            Some(TapeEntry::Chat { response, .. }) => Ok(response),
            _ => Err(ProviderError::ReplayMiss(format!(
                "chat {} ({})",
                request.template_id, key
            ))),
        }
    }
}

impl EmbedBackend for ReplayBackend {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                let key = embed_key(&self.model_tag, t);
                match self.tape.get(&key) {
                    Some(TapeEntry::Embed { vector, .. }) => Ok(vector),
                    _ => Err(ProviderError::ReplayMiss(format!("embedding of {t:?}"))),
                }
            })
            .collect()
    }
}

impl RerankBackend for ReplayBackend {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, ProviderError> {
        let key = rerank_key(query, candidates);
        match self.tape.get(&key) {
            Some(TapeEntry::Rerank { scores, .. }) => Ok(scores),
            _ => Err(ProviderError::ReplayMiss(format!("rerank for {query:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::vars;

    #[test]
    fn tape_round_trips_through_disk() {
        let tape = Tape::new();
        let req = ChatRequest::new("t", vars([("a", "b")]));
        tape.record(TapeEntry::Chat {
            key: req.request_key(),
            request: req.clone(),
            response: "hello".into(),
        });
        tape.record(TapeEntry::Embed {
            key: embed_key("m", "x"),
            model_tag: "m".into(),
            text: "x".into(),
            vector: vec![0.1, 1.0 / 3.0],
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tape.jsonl");
        tape.save(&p).unwrap();
        let back = std::sync::Arc::new(Tape::load(&p).unwrap());
        assert_eq!(back.len(), 2);
        let replay = ReplayBackend::new(back);
        assert_eq!(replay.complete("", &req).unwrap(), "hello");
        assert_eq!(replay.model_tag(), "m");
        assert_eq!(
            replay.embed_batch(&["x".to_string()]).unwrap(),
            vec![vec![0.1, 1.0 / 3.0]]
        );
        assert!(matches!(
            replay.score("q", &["c".to_string()]),
            Err(ProviderError::ReplayMiss(_))
        ));
    }
}
