//! Okapi BM25 over definition annotations and identifiers.

use std::collections::{BTreeMap, BTreeSet};

use super::{render_context, GroundedDefinition, GroundingContext, RetrievalError};
use crate::kb::{Description, KnowledgeBase};
use crate::provider::Gateway;
use crate::text::word_tokens;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    identifiers: Vec<String>,
    doc_len: Vec<f64>,
    avg_len: f64,
    /// term -> (document, term frequency)
    postings: BTreeMap<String, Vec<(usize, f64)>>,
}

impl Bm25Index {
    /// One document per definition: its annotation followed by its
    /// identifier.
    pub fn build(kb: &KnowledgeBase) -> Self {
        let view = kb.view();
        let docs = kb.definitions.iter().map(|d| {
            let ann = view
                .description_for(&d.identifier)
                .map(|x| x.annotation.as_str())
                .unwrap_or("");
            (d.identifier.clone(), format!("{ann} {}", d.identifier))
        });
        Bm25Index::from_documents(docs)
    }

    pub fn from_documents(docs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut identifiers = Vec::new();
        let mut doc_len = Vec::new();
        let mut postings: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, (id, text)) in docs.into_iter().enumerate() {
            let toks = word_tokens(&text);
            let mut tf: BTreeMap<String, f64> = BTreeMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1.0;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((i, f));
            }
            identifiers.push(id);
            doc_len.push(toks.len() as f64);
        }
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<f64>() / doc_len.len() as f64
        };
        Bm25Index {
            identifiers,
            doc_len,
            avg_len,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.identifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers.is_empty()
    }

    /// Non-negative IDF, `ln(1 + (N - n + 0.5) / (n + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings.get(term).map_or(0, Vec::len) as f64;
        let total = self.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Score of every document in input order. Each distinct query term
    /// counts once.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        let terms: BTreeSet<String> = word_tokens(query).into_iter().collect();
        for t in &terms {
            let Some(post) = self.postings.get(t) else {
                continue;
            };
            let idf = self.idf(t);
            for &(doc, tf) in post {
                let norm = 1.0 - BM25_B + BM25_B * self.doc_len[doc] / self.avg_len;
                scores[doc] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        scores
    }

    /// Top `k` documents with a positive score, ties by identifier.
    pub fn top(&self, query: &str, k: usize) -> Vec<(&str, f64)> {
        let scores = self.scores(query);
        let mut hits: Vec<(&str, f64)> = self
            .identifiers
            .iter()
            .map(String::as_str)
            .zip(scores)
            .filter(|(_, s)| *s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        hits.truncate(k);
        hits
    }
}

/// Lexical baseline: the raw statement against annotation and identifier
/// text, top `k` rendered like the main pipeline's context.
pub fn baseline_bm25(
    gateway: &Gateway,
    text: &str,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<GroundingContext, RetrievalError> {
    let index = Bm25Index::build(kb);
    let view = kb.view();
    let mut ctx = GroundingContext::default();
    for (id, score) in index.top(text, k) {
        let definition = view.definition(id).expect("indexed from kb").clone();
        let description = view
            .description_for(id)
            .cloned()
            .unwrap_or_else(|| Description::pending(&definition));
        ctx.entries.push(GroundedDefinition {
            definition,
            description,
            score,
        });
    }
    if ctx.entries.is_empty() {
        ctx.warnings.push("no document shares a term with the statement".into());
    }
    ctx.rendered_prompt = render_context(gateway, &ctx.entries)?;
    Ok(ctx)
}


#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::text::word_tokens;

    #[test]
    fn single_document_match() {
        let idx = Bm25Index::from_documents([("A".to_string(), "compact set".to_string())]);
        assert_eq!(idx.top("every compact thing", 3).len(), 1);
        assert!(idx.top("nothing shared", 3).is_empty());
    }

    #[test]
    fn matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let docs: Vec<(String, String)> = (0..100)
            .map(|i| {
                let len = rng.gen_range(1..30);
                let words: Vec<&str> =
                    (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
                (format!("d{i}"), words.join(" "))
            })
            .collect();
        let idx = Bm25Index::from_documents(docs.clone());
        let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| word_tokens(t)).collect();
        for _ in 0..20 {
            let q: Vec<&str> = (0..4).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
            let q = q.join(" ");
            let got = idx.scores(&q);
            let qt = word_tokens(&q);
            for (d, g) in got.iter().enumerate() {
                assert!((g - oracle::score(&toks, &qt, d)).abs() < 1e-9);
            }
        }
    }
}
