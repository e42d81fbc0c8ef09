use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::mock::{CosineReranker, HashEmbedder};
use super::replay::{embed_key, rerank_key, Tape, TapeEntry};
use super::{
    ChatBackend, ChatRequest, EmbedBackend, EmbeddingVector, ProviderError, RerankBackend,
    RerankResult, TemplateCatalog,
};
use crate::util::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(10)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewayLimits {
    /// Calls in flight across all providers.
    pub max_concurrent: usize,
    /// Minimum spacing between calls to the same provider kind.
    pub min_interval_ms: u64,
}

impl Default for GatewayLimits {
    fn default() -> Self {
        GatewayLimits {
            max_concurrent: 8,
            min_interval_ms: 0,
        }
    }
}

#[derive(Debug)]
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    interval: Duration,
    last_call: [Mutex<Option<Instant>>; 3],
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Chat = 0,
    Embed = 1,
    Rerank = 2,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock() -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    fn new(limits: GatewayLimits) -> Self {
        Limiter {
            max: limits.max_concurrent.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            interval: Duration::from_millis(limits.min_interval_ms),
            last_call: Default::default(),
        }
    }

    fn acquire(&self, kind: Kind) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock();
            while *n >= self.max {
                self.freed.wait(&mut n);
            }
            *n += 1;
        }
        if !self.interval.is_zero() {
            let mut last = self.last_call[kind as usize].lock();
            if let Some(prev) = *last {
                let elapsed = prev.elapsed();
                if elapsed < self.interval {
                    std::thread::sleep(self.interval - elapsed);
                }
            }
            *last = Some(Instant::now());
        }
        Permit(self)
    }
}

/// Ordered log of provider calls and pipeline events for audit output.
#[derive(Debug, Default)]
pub struct TraceLog {
    events: Mutex<Vec<serde_json::Value>>,
}

impl TraceLog {
    pub fn new() -> Self {
        TraceLog::default()
    }

    pub fn push(&self, event: serde_json::Value) {
        self.events.lock().push(event);
    }

    pub fn events(&self) -> Vec<serde_json::Value> {
        self.events.lock().clone()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for e in self.events.lock().iter() {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Uniform entry point to the chat, embedding and reranking providers.
/// Cloning is cheap; clones share limits, tape and trace.
#[derive(Clone)]
pub struct Gateway {
    templates: Arc<TemplateCatalog>,
    chat: Arc<dyn ChatBackend>,
    embed: Arc<dyn EmbedBackend>,
    rerank: Arc<dyn RerankBackend>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
    tape: Option<Arc<Tape>>,
    trace: Option<Arc<TraceLog>>,
    next_id: Arc<AtomicU64>,
    embed_batch_size: usize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("retry", &self.retry)
            .field("recording", &self.tape.is_some())
            .field("tracing", &self.trace.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        templates: TemplateCatalog,
        chat: Arc<dyn ChatBackend>,
        embed: Arc<dyn EmbedBackend>,
        rerank: Arc<dyn RerankBackend>,
    ) -> Self {
        Gateway {
            templates: Arc::new(templates),
            chat,
            embed,
            rerank,
            retry: RetryPolicy::default(),
            limiter: Arc::new(Limiter::new(GatewayLimits::default())),
            tape: None,
            trace: None,
            next_id: Arc::new(AtomicU64::new(1)),
            embed_batch_size: 64,
        }
    }

    /// Builtin templates, the hash embedder and the cosine reranker around
    /// the given chat backend; no retry delay.
    pub fn mock(chat: impl ChatBackend + 'static) -> Self {
        let embedder = HashEmbedder::default();
        Gateway::new(
            TemplateCatalog::builtin(),
            Arc::new(chat),
            Arc::new(embedder.clone()),
            Arc::new(CosineReranker::new(embedder)),
        )
        .with_retry(RetryPolicy::no_delay(2))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limits(mut self, limits: GatewayLimits) -> Self {
        self.limiter = Arc::new(Limiter::new(limits));
        self
    }

    pub fn with_tape(mut self, tape: Arc<Tape>) -> Self {
        self.tape = Some(tape);
        self
    }

    pub fn with_trace(mut self, trace: Arc<TraceLog>) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn with_chat(mut self, chat: Arc<dyn ChatBackend>) -> Self {
        self.chat = chat;
        self
    }

    pub fn with_embedder(mut self, embed: Arc<dyn EmbedBackend>) -> Self {
        self.embed = embed;
        self
    }

    pub fn with_reranker(mut self, rerank: Arc<dyn RerankBackend>) -> Self {
        self.rerank = rerank;
        self
    }

    pub fn with_embed_batch_size(mut self, n: usize) -> Self {
        self.embed_batch_size = n.max(1);
        self
    }

    pub fn templates(&self) -> &TemplateCatalog {
        &self.templates
    }

    pub fn trace(&self) -> Option<&TraceLog> {
        self.trace.as_deref()
    }

    pub fn embed_model_tag(&self) -> &str {
        self.embed.model_tag()
    }

    pub fn render(&self, template_id: &str, vars: &super::Vars) -> Result<String, ProviderError> {
        self.templates.render(template_id, vars)
    }

    fn with_retries<T>(
        &self,
        kind: Kind,
        mut call: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire(kind);
                call()
            };
            match result {
                Err(ProviderError::Transient(msg)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(ProviderError::Unavailable {
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    tracing::debug!(attempt, "transient provider failure, retrying: {msg}");
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Renders the request's template and asks the chat provider.
    pub fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let prompt = self.templates.render(&request.template_id, &request.variables)?;
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let result = self.with_retries(Kind::Chat, || self.chat.complete(&prompt, request));
        match &result {
            Ok(text) => {
                tracing::debug!(request_id, template = %request.template_id, "chat ok ({} bytes)", text.len());
                if let Some(tape) = &self.tape {
                    tape.record(TapeEntry::Chat {
                        key: request.request_key(),
                        request: request.clone(),
                        response: text.clone(),
                    });
                }
            }
            Err(e) => {
                tracing::warn!(request_id, template = %request.template_id, "chat failed: {e}")
            }
        }
        if let Some(trace) = &self.trace {
            trace.push(serde_json::json!({
                "event": "chat",
                "template": request.template_id,
                "vars": request.variables,
                "response": result.as_ref().ok(),
                "error": result.as_ref().err().map(|e| e.to_string()),
            }));
        }
        result
    }

    /// One unit vector per text, all from the same model.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(ProviderError::Input(format!("text at index {i} is empty")));
        }
        let tag = self.embed.model_tag().to_string();
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.embed_batch_size) {
            let raw = self.with_retries(Kind::Embed, || self.embed.embed_batch(chunk))?;
            if raw.len() != chunk.len() {
                return Err(ProviderError::Protocol(format!(
                    "embedding provider returned {} vectors for {} texts",
                    raw.len(),
                    chunk.len()
                )));
            }
            for (text, values) in chunk.iter().zip(raw) {
                if let Some(first) = out.first() {
                    let first: &EmbeddingVector = first;
                    if first.dim() != values.len() {
                        return Err(ProviderError::Protocol(format!(
                            "inconsistent embedding dimension {} vs {}",
                            values.len(),
                            first.dim()
                        )));
                    }
                }
                let v = EmbeddingVector::normalized(&values, tag.clone())?;
                if let Some(tape) = &self.tape {
                    tape.record(TapeEntry::Embed {
                        key: embed_key(&tag, text),
                        model_tag: tag.clone(),
                        text: text.clone(),
                        vector: values,
                    });
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        Ok(self
            .embed(std::slice::from_ref(&text.to_string()))?
            .remove(0))
    }

    /// Scores `candidates` against `query` and returns them best first.
    pub fn rerank(&self, query: &str, candidates: &[String]) -> Result<RerankResult, ProviderError> {
        if candidates.is_empty() {
            return Err(ProviderError::Input("rerank needs at least one candidate".into()));
        }
        let scores = self.with_retries(Kind::Rerank, || self.rerank.score(query, candidates))?;
        if scores.len() != candidates.len() {
            return Err(ProviderError::Protocol(format!(
                "reranker returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        if let Some(tape) = &self.tape {
            tape.record(TapeEntry::Rerank {
                key: rerank_key(query, candidates),
                query: query.to_string(),
                candidates: candidates.to_vec(),
                scores: scores.clone(),
            });
        }
        let result = RerankResult::from_scores(&scores);
        if let Some(trace) = &self.trace {
            trace.push(serde_json::json!({
                "event": "rerank",
                "query": query,
                "candidates": candidates,
                "ranking": result.ranking,
            }));
        }
        Ok(result)
    }
}
