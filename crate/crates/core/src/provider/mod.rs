//! Model provider gateway: chat completion, text embedding and reranking
//! behind small backend traits, with HTTP adapters for real services,
//! deterministic mocks for offline runs, and a record/replay tape.

mod gateway;
pub mod http;
pub mod mock;
pub mod replay;
pub mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

pub use gateway::{Gateway, GatewayLimits, RetryPolicy, TraceLog};
pub use template::{ids, Template, TemplateCatalog};

pub type Vars = BTreeMap<String, String>;

/// Builds a variable map from string pairs.
pub fn vars<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Vars {
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    /// Recoverable transport failure; retried by the gateway.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("provider configuration error: {0}")]
    Config(String),
    #[error("invalid provider input: {0}")]
    Input(String),
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("no scripted response for {0}")]
    Unscripted(String),
    #[error("replay tape has no entry for {0}")]
    ReplayMiss(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: String,
    pub variables: Vars,
    pub temperature: f64,
    pub max_output: u32,
}

impl ChatRequest {
    pub fn new(template_id: impl Into<String>, variables: Vars) -> Self {
        ChatRequest {
            template_id: template_id.into(),
            variables,
            temperature: 0.0,
            max_output: 1024,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output(mut self, max_output: u32) -> Self {
        self.max_output = max_output;
        self
    }

    /// Hash of the template id and variables; the key mock scripts use.
    pub fn vars_key(&self) -> String {
        vars_key(&self.template_id, &self.variables)
    }

    /// Hash of the full request; the key the replay tape uses.
    pub fn request_key(&self) -> String {
        let canonical = serde_json::json!({
            "kind": "chat",
            "template": self.template_id,
            "vars": self.variables,
            "temperature": self.temperature,
            "max_output": self.max_output,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

pub fn vars_key(template_id: &str, variables: &Vars) -> String {
    let canonical = serde_json::json!({ "template": template_id, "vars": variables });
    sha256_hex(canonical.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub model_tag: String,
}

impl EmbeddingVector {
    /// Unit-normalizes `raw`. An all-zero or non-finite vector is rejected.
    pub fn normalized(raw: &[f64], model_tag: impl Into<String>) -> Result<Self, ProviderError> {
        if raw.is_empty() {
            return Err(ProviderError::Protocol("empty embedding".into()));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(ProviderError::Protocol(
                "embedding is all-zero or not finite".into(),
            ));
        }
        Ok(EmbeddingVector {
            values: raw.iter().map(|x| (x / norm) as f32).collect(),
            model_tag: model_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Cosine similarity; vectors from different models or of different
    /// dimension are not comparable.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, ProviderError> {
        if self.model_tag != other.model_tag {
            return Err(ProviderError::Input(format!(
                "cannot compare embeddings from {:?} and {:?}",
                self.model_tag, other.model_tag
            )));
        }
        if self.dim() != other.dim() {
            return Err(ProviderError::Input(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let na = dot(&self.values, &self.values).sqrt();
        let nb = dot(&other.values, &other.values).sqrt();
        Ok(self.dot(other) / (na * nb))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// Candidates ordered by relevance: `(candidate index, score)`, scores
/// non-increasing, ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub ranking: Vec<(usize, f64)>,
}

impl RerankResult {
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut ranking: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RerankResult { ranking }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.ranking.iter().map(|(i, _)| *i).collect()
    }
}

/// Chat completion backend. Receives both the rendered prompt (for real
/// services) and the structured request (for scripted mocks and replay).
pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &str, request: &ChatRequest) -> Result<String, ProviderError>;
}

/// Embedding backend returning raw, not necessarily normalized, vectors.
pub trait EmbedBackend: Send + Sync {
    fn model_tag(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Reranking backend: one relevance score per candidate, in input order.
pub trait RerankBackend: Send + Sync {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, ProviderError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerank_ties_break_by_index() {
        let r = RerankResult::from_scores(&[0.5, 0.9, 0.5, 0.1]);
        assert_eq!(r.indices(), vec![1, 0, 2, 3]);
    }

    #[test]
    fn normalization_rejects_zero() {
        assert!(EmbeddingVector::normalized(&[0.0, 0.0], "m").is_err());
        let v = EmbeddingVector::normalized(&[3.0, 4.0], "m").unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
        let w = EmbeddingVector::normalized(&[3.0, 4.0], "other").unwrap();
        assert!(v.cosine(&w).is_err());
    }

    #[test]
    fn request_keys_cover_all_fields() {
        let a = ChatRequest::new("t", vars([("x", "1")]));
        let b = a.clone().with_temperature(0.7);
        assert_eq!(a.vars_key(), b.vars_key());
        assert_ne!(a.request_key(), b.request_key());
    }
}
