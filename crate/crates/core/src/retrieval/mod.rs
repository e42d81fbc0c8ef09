//! Query-time retrieval: problem classification and rewriting, concept
//! extraction, query enhancement, the keyword and semantic channels, final
//! reranking, and grounding-prompt rendering.

mod bm25;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::index::{IndexError, IndexSide, VectorIndex};
use crate::kb::{Definition, Description, KbView, KnowledgeBase};
use crate::provider::{ids, vars, ChatRequest, Gateway, ProviderError, RerankResult};
use crate::text::{field, fields, token_haystack, KeywordPattern};

pub use bm25::{baseline_bm25, Bm25Index, BM25_B, BM25_K1};

const REPROMPT_NOTE: &str =
    "Your previous reply could not be parsed. Reply again using exactly the requested line format.";

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("no concepts could be extracted, replies: {replies:?}")]
    ConceptExtraction { replies: Vec<String> },
    #[error("every retrieval channel failed: {}", warnings.join("; "))]
    AllChannelsFailed { warnings: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemStatement {
    pub text: String,
    /// Present only for implicit problems.
    pub rewritten_text: Option<String>,
    pub classification: Classification,
}

impl ProblemStatement {
    /// The text downstream stages read: the rewrite when there is one.
    pub fn working_text(&self) -> &str {
        self.rewritten_text.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryConcept {
    pub name: String,
    pub interpretation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedQuery {
    pub concept: QueryConcept,
    pub query_text: String,
    pub keywords: Vec<String>,
}

impl AugmentedQuery {
    /// `name: interpretation`, or the bare name when interpretation fell
    /// back to it.
    pub fn new(name: &str, interpretation: &str) -> Self {
        let query_text = if interpretation == name {
            name.to_string()
        } else {
            format!("{name}: {interpretation}")
        };
        AugmentedQuery {
            concept: QueryConcept {
                name: name.to_string(),
                interpretation: interpretation.to_string(),
            },
            query_text,
            keywords: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub keyword: bool,
    pub semantic: bool,
}

impl Provenance {
    pub const KEYWORD: Provenance = Provenance {
        keyword: true,
        semantic: false,
    };
    pub const SEMANTIC: Provenance = Provenance {
        keyword: false,
        semantic: true,
    };

    fn union(self, other: Provenance) -> Provenance {
        Provenance {
            keyword: self.keyword || other.keyword,
            semantic: self.semantic || other.semantic,
        }
    }
}

/// Candidate definitions keyed by identifier; iteration is in identifier
/// order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: BTreeMap<String, Provenance>,
}

impl CandidateSet {
    pub fn new() -> Self {
        CandidateSet::default()
    }

    pub fn insert(&mut self, identifier: impl Into<String>, provenance: Provenance) {
        let e = self.entries.entry(identifier.into()).or_default();
        *e = e.union(provenance);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, identifier: &str) -> bool {
        self.entries.contains_key(identifier)
    }

    pub fn identifiers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Union by identifier with provenance flags unioned.
pub fn merge_candidates(a: &CandidateSet, b: &CandidateSet) -> CandidateSet {
    let mut out = a.clone();
    for (id, p) in &b.entries {
        out.insert(id.clone(), *p);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedDefinition {
    pub definition: Definition,
    pub description: Description,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingContext {
    pub entries: Vec<GroundedDefinition>,
    pub rendered_prompt: String,
    /// Set when reranking fell back to embedding cosine.
    pub degraded: bool,
    pub warnings: Vec<String>,
}

impl GroundingContext {
    pub fn identifiers(&self) -> Vec<&str> {
        self.entries
            .iter()
            .map(|e| e.definition.identifier.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub max_concepts: usize,
    pub max_keywords: usize,
    pub recall_concepts: usize,
    pub rerank_concepts: usize,
    pub final_top: usize,
    /// Treat statements naming a known concept as explicit without asking
    /// the classifier.
    pub concept_name_prefilter: bool,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            max_concepts: 5,
            max_keywords: 8,
            recall_concepts: 10,
            rerank_concepts: 5,
            final_top: 3,
            concept_name_prefilter: false,
        }
    }
}

impl RetrievalSettings {
    pub fn check(&self) -> Result<(), String> {
        let caps = [
            ("max_concepts", self.max_concepts),
            ("max_keywords", self.max_keywords),
            ("recall_concepts", self.recall_concepts),
            ("rerank_concepts", self.rerank_concepts),
            ("final_top", self.final_top),
        ];
        if let Some((name, _)) = caps.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be at least 1"));
        }
        if !(self.final_top <= self.rerank_concepts && self.rerank_concepts <= self.recall_concepts) {
            return Err(format!(
                "expected final_top <= rerank_concepts <= recall_concepts, got {} / {} / {}",
                self.final_top, self.rerank_concepts, self.recall_concepts
            ));
        }
        Ok(())
    }
}

fn ask(gateway: &Gateway, template: &str, pairs: &[(&str, &str)]) -> Result<String, ProviderError> {
    gateway.chat(&ChatRequest::new(template, vars(pairs.iter().copied())))
}

fn parse_class(reply: &str) -> Option<Classification> {
    let v = field(reply, "CLASS")?.to_lowercase();
    if v.starts_with("explicit") {
        Some(Classification::Explicit)
    } else if v.starts_with("implicit") {
        Some(Classification::Implicit)
    } else {
        None
    }
}

/// Labels the problem explicit or implicit and rewrites implicit ones into
/// a statement that names its structures. Two unusable classifier replies
/// default to explicit.
pub fn classify_and_rewrite(
    gateway: &Gateway,
    text: &str,
    warnings: &mut Vec<String>,
) -> Result<ProblemStatement, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::Input("statement is empty".into()));
    }
    let mut class = None;
    for note in ["", REPROMPT_NOTE] {
        match ask(gateway, ids::CLASSIFY_PROBLEM, &[("statement", text), ("retry_note", note)]) {
            Ok(reply) => {
                class = parse_class(&reply);
                if class.is_some() {
                    break;
                }
            }
            Err(e) => warnings.push(format!("classifier failed: {e}")),
        }
    }
    let classification = class.unwrap_or_else(|| {
        warnings.push("classifier gave no usable label twice; treating the problem as explicit".into());
        Classification::Explicit
    });
    let rewritten_text = match classification {
        Classification::Explicit => None,
        Classification::Implicit => match ask(gateway, ids::REWRITE_PROBLEM, &[("statement", text)]) {
            Ok(r) if !r.trim().is_empty() => Some(r.trim().to_string()),
            Ok(_) => {
                warnings.push("rewrite returned empty text; using the original statement".into());
                None
            }
            Err(e) => {
                warnings.push(format!("rewrite failed: {e}; using the original statement"));
                None
            }
        },
    };
    Ok(ProblemStatement {
        text: text.to_string(),
        rewritten_text,
        classification,
    })
}

fn statement_names_a_concept(text: &str, kb: &KnowledgeBase) -> bool {
    let lower = text.to_lowercase();
    kb.concepts
        .iter()
        .any(|c| !c.name.is_empty() && lower.contains(&c.name.to_lowercase()))
}

/// Core concept names, deduplicated in reply order and capped at `max`.
pub fn extract_query_concepts(
    gateway: &Gateway,
    statement: &ProblemStatement,
    max: usize,
    warnings: &mut Vec<String>,
) -> Result<Vec<String>, RetrievalError> {
    let max_s = max.to_string();
    let mut replies = Vec::new();
    for note in ["", REPROMPT_NOTE] {
        let reply = ask(
            gateway,
            ids::EXTRACT_QUERY_CONCEPTS,
            &[
                ("statement", statement.working_text()),
                ("max_concepts", &max_s),
                ("retry_note", note),
            ],
        )?;
        let mut names: Vec<String> = Vec::new();
        for n in fields(&reply, "CONCEPT") {
            if !names.contains(&n) {
                names.push(n);
            }
        }
        if !names.is_empty() {
            if names.len() > max {
                warnings.push(format!(
                    "{} concepts extracted, keeping the first {max}",
                    names.len()
                ));
                names.truncate(max);
            }
            return Ok(names);
        }
        replies.push(reply);
    }
    Err(RetrievalError::ConceptExtraction { replies })
}

/// Domain-aware interpretation of a concept in the statement's context.
/// Falls back to the bare concept name when no usable reply arrives.
pub fn interpret_concept(
    gateway: &Gateway,
    concept: &str,
    statement: &str,
    warnings: &mut Vec<String>,
) -> String {
    for note in ["", REPROMPT_NOTE] {
        match ask(
            gateway,
            ids::INTERPRET_CONCEPT,
            &[("concept", concept), ("statement", statement), ("retry_note", note)],
        ) {
            Ok(r) if !r.trim().is_empty() => return r.trim().to_string(),
            Ok(_) => {}
            Err(e) => warnings.push(format!("interpretation of {concept:?} failed: {e}")),
        }
    }
    warnings.push(format!("no interpretation for {concept:?}; querying by name alone"));
    concept.to_string()
}

fn parse_keywords(reply: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in fields(reply, "KEYWORDS") {
        for kw in line.split([',', ';']) {
            let kw = kw.trim().trim_matches(|c| matches!(c, '`' | '"' | '\'')).trim();
            if !kw.is_empty() && !out.iter().any(|o| o == kw) {
                out.push(kw.to_string());
            }
        }
    }
    out
}

/// Asks for search keywords for the concept, one reprompt on an unusable
/// reply.
pub fn generate_keywords(
    gateway: &Gateway,
    query: &AugmentedQuery,
    max: usize,
) -> Result<Vec<String>, RetrievalError> {
    let max_s = max.to_string();
    let mut replies = Vec::new();
    for note in ["", REPROMPT_NOTE] {
        let reply = ask(
            gateway,
            ids::GENERATE_KEYWORDS,
            &[
                ("concept", query.concept.name.as_str()),
                ("interpretation", query.concept.interpretation.as_str()),
                ("max_keywords", &max_s),
                ("retry_note", note),
            ],
        )?;
        let mut kws = parse_keywords(&reply);
        if !kws.is_empty() {
            kws.truncate(max);
            return Ok(kws);
        }
        replies.push(reply);
    }
    Err(RetrievalError::Provider(ProviderError::Protocol(format!(
        "no keywords in replies {replies:?}"
    ))))
}

/// Precomputed identifier token haystacks for keyword matching.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    haystacks: Vec<(String, String)>,
}

impl KeywordMatcher {
    pub fn new(kb: &KnowledgeBase) -> Self {
        KeywordMatcher {
            haystacks: kb
                .definitions
                .iter()
                .map(|d| (d.identifier.clone(), token_haystack(&d.identifier)))
                .collect(),
        }
    }

    /// Every definition whose identifier matches some keyword as a whole
    /// token run.
    pub fn match_keywords(&self, keywords: &[String]) -> CandidateSet {
        let patterns: Vec<KeywordPattern> =
            keywords.iter().filter_map(|k| KeywordPattern::compile(k)).collect();
        let mut set = CandidateSet::new();
        for (id, hay) in &self.haystacks {
            if patterns.iter().any(|p| p.matches_haystack(hay)) {
                set.insert(id.clone(), Provenance::KEYWORD);
            }
        }
        set
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelOutput {
    pub set: CandidateSet,
    pub keywords: Vec<String>,
    /// Concepts kept by the semantic channel with their rerank scores.
    pub concepts: Vec<(String, f64)>,
    pub degraded: bool,
}

/// Symbol-level channel: model-suggested keywords matched against every
/// identifier. A keyword-generation failure degrades to an empty set.
pub fn keyword_channel(
    gateway: &Gateway,
    query: &AugmentedQuery,
    matcher: &KeywordMatcher,
    max_keywords: usize,
    warnings: &mut Vec<String>,
) -> ChannelOutput {
    match generate_keywords(gateway, query, max_keywords) {
        Ok(keywords) => ChannelOutput {
            set: matcher.match_keywords(&keywords),
            keywords,
            ..ChannelOutput::default()
        },
        Err(e) => {
            warnings.push(format!(
                "keyword channel for {:?} failed: {e}",
                query.concept.name
            ));
            ChannelOutput::default()
        }
    }
}

/// Semantic channel: recall the closest concepts by explanation embedding,
/// rerank their explanations against the query, and collect every
/// definition linked to the survivors.
pub fn semantic_channel(
    gateway: &Gateway,
    query: &AugmentedQuery,
    index: &VectorIndex,
    view: &KbView<'_>,
    settings: &RetrievalSettings,
    warnings: &mut Vec<String>,
) -> Result<ChannelOutput, RetrievalError> {
    if index.side() != IndexSide::Concept {
        return Err(RetrievalError::Input(
            "the semantic channel needs a concept-side index".into(),
        ));
    }
    let q = gateway.embed_one(&query.query_text)?;
    let recalled = index.search_concepts(&q, settings.recall_concepts)?;
    let explanations: Vec<String> = recalled
        .iter()
        .map(|(name, _)| {
            view.concept_by_name(name)
                .map(|c| c.explanation.clone())
                .unwrap_or_else(|| name.clone())
        })
        .collect();
    let mut degraded = false;
    let ranking = if explanations.is_empty() {
        RerankResult { ranking: Vec::new() }
    } else {
        match gateway.rerank(&query.query_text, &explanations) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("concept rerank failed ({e}); keeping recall order"));
                degraded = true;
                RerankResult::from_scores(&recalled.iter().map(|(_, s)| *s).collect::<Vec<_>>())
            }
        }
    };
    let mut set = CandidateSet::new();
    let mut concepts = Vec::new();
    for &(i, score) in ranking.ranking.iter().take(settings.rerank_concepts) {
        let name = &recalled[i].0;
        for id in view.definitions_for_concept(name) {
            set.insert(id, Provenance::SEMANTIC);
        }
        concepts.push((name.clone(), score));
    }
    Ok(ChannelOutput {
        set,
        keywords: Vec::new(),
        concepts,
        degraded,
    })
}

fn candidate_text(view: &KbView<'_>, identifier: &str) -> String {
    match view.description_for(identifier) {
        Some(d) if !d.annotation.trim().is_empty() => d.annotation.clone(),
        _ => identifier.to_string(),
    }
}

fn score_against(
    gateway: &Gateway,
    query: &str,
    texts: &[String],
) -> Result<(Vec<f64>, bool), RetrievalError> {
    match gateway.rerank(query, texts) {
        Ok(r) => {
            let mut scores = vec![0.0; texts.len()];
            for (i, s) in r.ranking {
                scores[i] = s;
            }
            Ok((scores, false))
        }
        Err(e) => {
            tracing::warn!("rerank failed ({e}); falling back to embedding cosine");
            let mut all = vec![query.to_string()];
            all.extend(texts.iter().cloned());
            let vs = gateway.embed(&all)?;
            let scores = vs[1..]
                .iter()
                .map(|v| v.cosine(&vs[0]))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((scores, true))
        }
    }
}

/// Scores every candidate's annotation against each query's
/// interpretation, keeps a candidate's best score, and returns the top
/// `top` as a rendered grounding context.
pub fn final_rerank(
    gateway: &Gateway,
    queries: &[AugmentedQuery],
    candidates: &CandidateSet,
    view: &KbView<'_>,
    top: usize,
) -> Result<GroundingContext, RetrievalError> {
    let mut ctx = GroundingContext::default();
    let ids: Vec<&str> = candidates
        .identifiers()
        .filter(|id| view.definition(id).is_some())
        .collect();
    if ids.is_empty() || queries.is_empty() {
        ctx.warnings.push("no candidates to rerank; context is empty".into());
        return Ok(ctx);
    }
    let texts: Vec<String> = ids.iter().map(|id| candidate_text(view, id)).collect();
    let mut best = vec![f64::NEG_INFINITY; ids.len()];
    for q in queries {
        let (scores, degraded) = score_against(gateway, &q.concept.interpretation, &texts)?;
        if degraded && !ctx.degraded {
            ctx.degraded = true;
            ctx.warnings
                .push("reranker unavailable; final scores are embedding cosines".into());
        }
        for (b, s) in best.iter_mut().zip(scores) {
            *b = b.max(s);
        }
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then_with(|| ids[a].cmp(ids[b])));
    for i in order.into_iter().take(top) {
        let definition = view.definition(ids[i]).expect("filtered above").clone();
        let description = view
            .description_for(ids[i])
            .cloned()
            .unwrap_or_else(|| Description::pending(&definition));
        ctx.entries.push(GroundedDefinition {
            definition,
            description,
            score: best[i],
        });
    }
    ctx.rendered_prompt = render_context(gateway, &ctx.entries)?;
    Ok(ctx)
}

/// Renders entries through the grounding templates; empty for no entries.
pub fn render_context(
    gateway: &Gateway,
    entries: &[GroundedDefinition],
) -> Result<String, RetrievalError> {
    if entries.is_empty() {
        return Ok(String::new());
    }
    let mut blocks = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let rank = (i + 1).to_string();
        blocks.push(gateway.render(
            ids::GROUNDING_ENTRY,
            &vars([
                ("rank", rank.as_str()),
                ("identifier", e.definition.identifier.as_str()),
                ("kind", e.definition.kind.as_str()),
                ("module_path", e.definition.module_path.as_str()),
                ("formal_expression", e.definition.formal_expression.as_str()),
                ("annotation", e.description.annotation.as_str()),
            ]),
        )?);
    }
    Ok(gateway.render(
        ids::GROUNDING_CONTEXT,
        &vars([("entries", blocks.join("\n\n"))]),
    )?)
}

/// What one query concept contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrace {
    pub query: AugmentedQuery,
    pub keyword: ChannelOutput,
    pub semantic: Option<ChannelOutput>,
    pub merged: CandidateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub problem: ProblemStatement,
    pub concepts: Vec<ConceptTrace>,
    pub candidates: CandidateSet,
    pub context: GroundingContext,
}

/// Read-only retrieval engine over one knowledge base and concept index.
#[derive(Debug)]
pub struct Retriever<'a> {
    gateway: &'a Gateway,
    kb: &'a KnowledgeBase,
    view: KbView<'a>,
    index: &'a VectorIndex,
    matcher: KeywordMatcher,
    settings: RetrievalSettings,
}

impl<'a> Retriever<'a> {
    pub fn new(
        gateway: &'a Gateway,
        kb: &'a KnowledgeBase,
        index: &'a VectorIndex,
        settings: RetrievalSettings,
    ) -> Self {
        Retriever {
            gateway,
            kb,
            view: kb.view(),
            index,
            matcher: KeywordMatcher::new(kb),
            settings,
        }
    }

    pub fn view(&self) -> &KbView<'a> {
        &self.view
    }

    fn concept_pipeline(&self, name: &str, statement: &str) -> (ConceptTrace, Vec<String>, bool) {
        let mut warnings = Vec::new();
        let interpretation = interpret_concept(self.gateway, name, statement, &mut warnings);
        let mut query = AugmentedQuery::new(name, &interpretation);
        let mut kw_warn = Vec::new();
        let mut sem_warn = Vec::new();
        let (keyword, semantic) = rayon::join(
            || keyword_channel(self.gateway, &query, &self.matcher, self.settings.max_keywords, &mut kw_warn),
            || {
                semantic_channel(
                    self.gateway,
                    &query,
                    self.index,
                    &self.view,
                    &self.settings,
                    &mut sem_warn,
                )
            },
        );
        warnings.extend(kw_warn);
        warnings.extend(sem_warn);
        let keyword_failed = keyword.keywords.is_empty();
        let semantic = match semantic {
            Ok(s) => Some(s),
            Err(e) => {
                warnings.push(format!("semantic channel for {name:?} failed: {e}"));
                None
            }
        };
        let both_failed = keyword_failed && semantic.is_none();
        query.keywords = keyword.keywords.clone();
        let merged = merge_candidates(
            &keyword.set,
            semantic.as_ref().map(|s| &s.set).unwrap_or(&CandidateSet::new()),
        );
        if let Some(trace) = self.gateway.trace() {
            trace.push(serde_json::json!({
                "event": "channels",
                "concept": name,
                "query_text": query.query_text,
                "keywords": keyword.keywords,
                "keyword_hits": keyword.set.identifiers().collect::<Vec<_>>(),
                "semantic_concepts": semantic.as_ref().map(|s| &s.concepts),
                "semantic_hits": semantic.as_ref().map(|s| s.set.identifiers().collect::<Vec<_>>()),
            }));
        }
        (
            ConceptTrace {
                query,
                keyword,
                semantic,
                merged,
            },
            warnings,
            both_failed,
        )
    }

    /// The full pipeline for one statement.
    pub fn retrieve(&self, text: &str) -> Result<Retrieval, RetrievalError> {
        use rayon::prelude::*;

        let mut warnings = Vec::new();
        let problem = if self.settings.concept_name_prefilter && statement_names_a_concept(text, self.kb)
        {
            if text.trim().is_empty() {
                return Err(RetrievalError::Input("statement is empty".into()));
            }
            ProblemStatement {
                text: text.to_string(),
                rewritten_text: None,
                classification: Classification::Explicit,
            }
        } else {
            classify_and_rewrite(self.gateway, text, &mut warnings)?
        };
        let names =
            extract_query_concepts(self.gateway, &problem, self.settings.max_concepts, &mut warnings)?;
        let statement = problem.working_text().to_string();
        let per_concept: Vec<(ConceptTrace, Vec<String>, bool)> = names
            .par_iter()
            .map(|n| self.concept_pipeline(n, &statement))
            .collect();
        let mut candidates = CandidateSet::new();
        let mut all_failed = true;
        let mut concepts = Vec::with_capacity(per_concept.len());
        for (trace, w, failed) in per_concept {
            warnings.extend(w);
            all_failed &= failed;
            candidates = merge_candidates(&candidates, &trace.merged);
            concepts.push(trace);
        }
        if all_failed {
            return Err(RetrievalError::AllChannelsFailed { warnings });
        }
        let queries: Vec<AugmentedQuery> = concepts.iter().map(|c| c.query.clone()).collect();
        let mut context = final_rerank(
            self.gateway,
            &queries,
            &candidates,
            &self.view,
            self.settings.final_top,
        )?;
        if concepts.iter().any(|c| c.semantic.as_ref().is_some_and(|s| s.degraded)) {
            context.degraded = true;
        }
        warnings.append(&mut context.warnings);
        context.warnings = warnings;
        if let Some(trace) = self.gateway.trace() {
            trace.push(serde_json::json!({
                "event": "final_rerank",
                "candidates": candidates.identifiers().collect::<Vec<_>>(),
                "selected": context.entries.iter().map(|e| (&e.definition.identifier, e.score)).collect::<Vec<_>>(),
                "degraded": context.degraded,
            }));
        }
        Ok(Retrieval {
            problem,
            concepts,
            candidates,
            context,
        })
    }
}

/// One-shot convenience over [`Retriever`].
pub fn retrieve(
    gateway: &Gateway,
    text: &str,
    kb: &KnowledgeBase,
    index: &VectorIndex,
    settings: &RetrievalSettings,
) -> Result<Retrieval, RetrievalError> {
    Retriever::new(gateway, kb, index, settings.clone()).retrieve(text)
}

#[cfg(test)]
mod tests;
