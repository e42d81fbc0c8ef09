//! HTTP adapters following the common chat-completions, embeddings and
//! rerank JSON conventions. Paths and response field locations are
//! configurable per provider because hosted models disagree on them.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, EmbedBackend, ProviderError, RerankBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FieldMapping {
    /// Path appended to `base_url`.
    pub endpoint: Option<String>,
    /// JSON pointer to the reply text (chat) or the result array
    /// (embeddings, rerank).
    pub response_pointer: Option<String>,
    /// Request field carrying the output budget (chat).
    pub max_tokens_field: Option<String>,
    /// Field holding the vector inside each embedding item.
    pub vector_field: Option<String>,
    /// Field holding the candidate index inside each result item.
    pub index_field: Option<String>,
    /// Field holding the score inside each rerank result item.
    pub score_field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub base_url: String,
    /// Environment variable holding the API key; the key itself never
    /// appears in configuration.
    pub api_key_env: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub mapping: FieldMapping,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug)]
struct HttpCore {
    client: Client,
    url: String,
    api_key: Option<String>,
    model: String,
    mapping: FieldMapping,
}

impl HttpCore {
    fn new(cfg: &HttpProviderConfig, default_endpoint: &str) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Config(format!("http client: {e}")))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let endpoint = cfg.mapping.endpoint.as_deref().unwrap_or(default_endpoint);
        Ok(HttpCore {
            client,
            url: format!("{}{}", cfg.base_url.trim_end_matches('/'), endpoint),
            api_key,
            model: cfg.model.clone(),
            mapping: cfg.mapping.clone(),
        })
    }

    fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ProviderError::Transient(e.to_string())
            } else {
                ProviderError::Protocol(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Protocol(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::Protocol(format!("response is not JSON: {e}")))
    }

    fn pointer<'v>(&self, v: &'v Value, default: &str) -> Result<&'v Value, ProviderError> {
        let ptr = self.mapping.response_pointer.as_deref().unwrap_or(default);
        v.pointer(ptr)
            .ok_or_else(|| ProviderError::Protocol(format!("response has no {ptr}")))
    }
}

#[derive(Debug)]
pub struct HttpChat(HttpCore);

impl HttpChat {
    pub fn new(cfg: &HttpProviderConfig) -> Result<Self, ProviderError> {
        Ok(HttpChat(HttpCore::new(cfg, "/chat/completions")?))
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, prompt: &str, request: &ChatRequest) -> Result<String, ProviderError> {
        let core = &self.0;
        let mut body = json!({
            "model": core.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
        });
        let budget_field = core.mapping.max_tokens_field.as_deref().unwrap_or("max_tokens");
        body[budget_field] = json!(request.max_output);
        let resp = core.post(&body)?;
        core.pointer(&resp, "/choices/0/message/content")?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Protocol("reply text is not a string".into()))
    }
}

#[derive(Debug)]
pub struct HttpEmbed {
    core: HttpCore,
    tag: String,
}

impl HttpEmbed {
    pub fn new(cfg: &HttpProviderConfig) -> Result<Self, ProviderError> {
        Ok(HttpEmbed {
            core: HttpCore::new(cfg, "/embeddings")?,
            tag: cfg.model.clone(),
        })
    }
}

fn indexed_items<'v>(
    items: &'v Value,
    index_field: &str,
    expected: usize,
) -> Result<Vec<(usize, &'v Value)>, ProviderError> {
    let arr = items
        .as_array()
        .ok_or_else(|| ProviderError::Protocol("result is not an array".into()))?;
    let mut out = Vec::with_capacity(arr.len());
    for (pos, item) in arr.iter().enumerate() {
        let idx = match item.get(index_field) {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| ProviderError::Protocol(format!("bad {index_field}")))?
                as usize,
            None => pos,
        };
        if idx >= expected {
            return Err(ProviderError::Protocol(format!("index {idx} out of range")));
        }
        out.push((idx, item));
    }
    Ok(out)
}

impl EmbedBackend for HttpEmbed {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let core = &self.core;
        let resp = core.post(&json!({"model": core.model, "input": texts}))?;
        let items = core.pointer(&resp, "/data")?;
        let vector_field = core.mapping.vector_field.as_deref().unwrap_or("embedding");
        let index_field = core.mapping.index_field.as_deref().unwrap_or("index");
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (idx, item) in indexed_items(items, index_field, texts.len())? {
            let v = item
                .get(vector_field)
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::Protocol(format!("item has no {vector_field}")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| ProviderError::Protocol("non-numeric coordinate".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            out[idx] = Some(v);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| ProviderError::Protocol(format!("no vector for input {i}"))))
            .collect()
    }
}

#[derive(Debug)]
pub struct HttpRerank(HttpCore);

impl HttpRerank {
    pub fn new(cfg: &HttpProviderConfig) -> Result<Self, ProviderError> {
        Ok(HttpRerank(HttpCore::new(cfg, "/rerank")?))
    }
}

impl RerankBackend for HttpRerank {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, ProviderError> {
        let core = &self.0;
        let resp = core.post(&json!({"model": core.model, "query": query, "documents": candidates}))?;
        let items = core.pointer(&resp, "/results")?;
        let index_field = core.mapping.index_field.as_deref().unwrap_or("index");
        let score_field = core.mapping.score_field.as_deref().unwrap_or("relevance_score");
        let mut out: Vec<Option<f64>> = vec![None; candidates.len()];
        for (idx, item) in indexed_items(items, index_field, candidates.len())? {
            out[idx] = Some(
                item.get(score_field)
                    .and_then(Value::as_f64)
                    .ok_or_else(|| ProviderError::Protocol(format!("item has no {score_field}")))?,
            );
        }
        out.into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| ProviderError::Protocol(format!("no score for candidate {i}"))))
            .collect()
    }
}
