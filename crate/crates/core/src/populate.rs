//! Knowledge-base population: back-translation with self-consistency
//! selection, concept extraction, and assembly of concepts and links.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kb::{
    upsert_entities, Concept, ConceptLink, Definition, Description, DescriptionOrigin, KbError,
    KnowledgeBase, Upsert,
};
use crate::provider::{ids, vars, ChatRequest, Gateway, ProviderError};
use crate::text::field;

const REPROMPT_NOTE: &str =
    "Your previous reply could not be parsed. Reply again using exactly the requested line format.";

#[derive(Debug, thiserror::Error)]
pub enum PopulateError {
    #[error("{identifier}: {source}")]
    Provider {
        identifier: String,
        #[source]
        source: ProviderError,
    },
    #[error("{identifier}: concept extraction failed, replies: {replies:?}")]
    Extraction {
        identifier: String,
        replies: Vec<String>,
    },
    #[error("{identifier}: every back-translation candidate was empty")]
    NoCandidates { identifier: String },
    #[error("{identifier}: {message}")]
    Input { identifier: String, message: String },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("interrupted after {completed} definition(s); progress saved to checkpoint")]
    Interrupted { completed: usize },
    #[error("only {completed} of {total} definition(s) populated, below the required ratio {required}")]
    BelowThreshold {
        completed: usize,
        total: usize,
        required: f64,
        skipped: Vec<SkipEntry>,
    },
}

impl PopulateError {
    fn stage(&self) -> &'static str {
        match self {
            PopulateError::Provider { .. } | PopulateError::NoCandidates { .. } => "back_translate",
            PopulateError::Extraction { .. } => "extract_concept",
            PopulateError::Input { .. } => "input",
            _ => "populate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackTranslationCandidate {
    pub text: String,
    /// Cosine against the original annotation; absent when there is none.
    pub similarity_to_annotation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackTranslation {
    pub candidates: Vec<BackTranslationCandidate>,
    /// Candidate slots whose replies stayed empty.
    pub dropped: Vec<usize>,
}

/// Asks for `n` independent back-translations of `def`. A slot whose reply
/// is empty is asked once more and then dropped.
pub fn back_translate(
    gateway: &Gateway,
    def: &Definition,
    n: usize,
    temperature: f64,
) -> Result<BackTranslation, PopulateError> {
    if def.formal_expression.trim().is_empty() {
        return Err(PopulateError::Input {
            identifier: def.identifier.clone(),
            message: "formal expression is empty".into(),
        });
    }
    let mut candidates = Vec::with_capacity(n);
    let mut dropped = Vec::new();
    for slot in 0..n {
        let mut text = String::new();
        for attempt in 0..2 {
            let req = ChatRequest::new(
                ids::BACK_TRANSLATE,
                vars([
                    ("identifier", def.identifier.as_str()),
                    ("module_path", def.module_path.as_str()),
                    ("formal_expression", def.formal_expression.as_str()),
                    ("candidate", &slot.to_string()),
                    ("attempt", &attempt.to_string()),
                ]),
            )
            .with_temperature(temperature);
            text = gateway
                .chat(&req)
                .map_err(|source| PopulateError::Provider {
                    identifier: def.identifier.clone(),
                    source,
                })?
                .trim()
                .to_string();
            if !text.is_empty() {
                break;
            }
        }
        if text.is_empty() {
            tracing::warn!(identifier = %def.identifier, slot, "empty back-translation dropped");
            dropped.push(slot);
        } else {
            candidates.push(BackTranslationCandidate {
                text,
                similarity_to_annotation: None,
            });
        }
    }
    Ok(BackTranslation { candidates, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub candidate: BackTranslationCandidate,
    /// Set when there was no annotation to compare against.
    pub fallback: bool,
}

/// Picks the candidate whose embedding is closest to the original
/// annotation; ties go to the lowest index. Without an annotation the first
/// candidate is returned.
pub fn select_consistent(
    gateway: &Gateway,
    candidates: &[BackTranslationCandidate],
    original_annotation: Option<&str>,
) -> Result<Selection, ProviderError> {
    if candidates.is_empty() {
        return Err(ProviderError::Input("no candidates to select from".into()));
    }
    let annotation = match original_annotation.map(str::trim) {
        Some(a) if !a.is_empty() => a,
        _ => {
            return Ok(Selection {
                index: 0,
                candidate: candidates[0].clone(),
                fallback: true,
            })
        }
    };
    let mut texts: Vec<String> = vec![annotation.to_string()];
    texts.extend(candidates.iter().map(|c| c.text.clone()));
    let vectors = gateway.embed(&texts)?;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let s = vectors[i + 1].cosine(&vectors[0])?;
        if s > best_score {
            best = i;
            best_score = s;
        }
        scored.push(BackTranslationCandidate {
            text: c.text.clone(),
            similarity_to_annotation: Some(s),
        });
    }
    Ok(Selection {
        index: best,
        candidate: scored.swap_remove(best),
        fallback: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub concept: Concept,
    /// Number of reprompts needed (0 or 1).
    pub retries: u32,
}

fn parse_concept(reply: &str) -> Option<Concept> {
    let name = field(reply, "NAME")?;
    let explanation = field(reply, "EXPLANATION")?;
    let domain = field(reply, "DOMAIN").unwrap_or_else(|| "unknown".to_string());
    Some(Concept::new(name, domain, explanation))
}

/// Extracts the concept a description is about from a fielded reply,
/// reprompting once when the reply cannot be parsed.
pub fn extract_concept(
    gateway: &Gateway,
    identifier: &str,
    description: &str,
) -> Result<Extracted, PopulateError> {
    if description.trim().is_empty() {
        return Err(PopulateError::Input {
            identifier: identifier.to_string(),
            message: "description is empty".into(),
        });
    }
    let mut replies = Vec::new();
    for (retries, note) in [(0, ""), (1, REPROMPT_NOTE)] {
        let req = ChatRequest::new(
            ids::EXTRACT_CONCEPT,
            vars([
                ("identifier", identifier),
                ("description", description),
                ("retry_note", note),
            ]),
        );
        let reply = gateway
            .chat(&req)
            .map_err(|source| PopulateError::Provider {
                identifier: identifier.to_string(),
                source,
            })?;
        if let Some(concept) = parse_concept(&reply) {
            return Ok(Extracted { concept, retries });
        }
        replies.push(reply);
    }
    Err(PopulateError::Extraction {
        identifier: identifier.to_string(),
        replies,
    })
}

#[derive(Debug, Clone)]
pub struct PopulateOptions {
    pub candidates: usize,
    pub temperature: f64,
    /// Fraction of outstanding definitions that must complete.
    pub success_ratio: f64,
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
    /// Reuse completed work from an existing checkpoint.
    pub resume: bool,
    pub workers: usize,
    /// Checked between checkpoint batches.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for PopulateOptions {
    fn default() -> Self {
        PopulateOptions {
            candidates: 3,
            temperature: 0.7,
            success_ratio: 0.9,
            checkpoint_every: 100,
            checkpoint: None,
            resume: false,
            workers: 4,
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub identifier: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub identifier: String,
    pub slot: usize,
}

/// Result of one definition's population, as stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskOutput {
    identifier: String,
    description: Description,
    concept: Concept,
    dropped: Vec<usize>,
    fallback: bool,
    retries: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulateReport {
    pub outstanding: usize,
    pub completed: usize,
    pub resumed: usize,
    pub skipped: Vec<SkipEntry>,
    pub dropped_candidates: Vec<DroppedCandidate>,
    pub fallback_selections: usize,
    pub extraction_retries: usize,
}

#[derive(Debug)]
pub struct PopulateOutcome {
    pub kb: KnowledgeBase,
    pub report: PopulateReport,
}

struct WorkItem<'a> {
    definition: &'a Definition,
    description: Option<&'a Description>,
}

fn outstanding(kb: &KnowledgeBase) -> Vec<WorkItem<'_>> {
    let view = kb.view();
    let linked: BTreeSet<&str> = kb
        .links
        .iter()
        .flat_map(|l| l.description_ids.iter().map(String::as_str))
        .collect();
    let mut items: Vec<WorkItem<'_>> = kb
        .definitions
        .iter()
        .filter_map(|d| {
            let desc = view.description_for(&d.identifier);
            let done = desc.is_some_and(|x| !x.is_pending() && linked.contains(x.id.as_str()));
            (!done).then_some(WorkItem {
                definition: d,
                description: desc,
            })
        })
        .collect();
    items.sort_by(|a, b| a.definition.identifier.cmp(&b.definition.identifier));
    items
}

fn run_task(
    gateway: &Gateway,
    item: &WorkItem<'_>,
    opts: &PopulateOptions,
) -> Result<TaskOutput, PopulateError> {
    let def = item.definition;
    let (description, dropped, fallback) = match item.description {
        Some(d) if !d.is_pending() => (d.clone(), Vec::new(), false),
        _ => {
            let bt = back_translate(gateway, def, opts.candidates, opts.temperature)?;
            if bt.candidates.is_empty() {
                return Err(PopulateError::NoCandidates {
                    identifier: def.identifier.clone(),
                });
            }
            let sel = select_consistent(gateway, &bt.candidates, None).map_err(|source| {
                PopulateError::Provider {
                    identifier: def.identifier.clone(),
                    source,
                }
            })?;
            (
                Description::new(def, sel.candidate.text, DescriptionOrigin::BackTranslated),
                bt.dropped,
                sel.fallback,
            )
        }
    };
    let extracted = extract_concept(gateway, &def.identifier, &description.annotation)?;
    Ok(TaskOutput {
        identifier: def.identifier.clone(),
        description,
        concept: extracted.concept,
        dropped,
        fallback,
        retries: extracted.retries,
    })
}

fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, TaskOutput>, PopulateError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(source) => {
            return Err(PopulateError::Checkpoint {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut out = BTreeMap::new();
    for line in text.lines() {
        // A torn final line from an interrupted append is ignored.
        if let Ok(t) = serde_json::from_str::<TaskOutput>(line) {
            out.insert(t.identifier.clone(), t);
        }
    }
    Ok(out)
}

fn append_checkpoint(path: &Path, outputs: &[&TaskOutput]) -> Result<(), PopulateError> {
    let io = |source| PopulateError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    let mut buf = String::new();
    for o in outputs {
        buf.push_str(&serde_json::to_string(o).expect("task output serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(io)?;
    f.sync_data().map_err(io)
}

/// Populates every outstanding definition: pending descriptions are
/// replaced by a selected back-translation, and every unlinked description
/// goes through concept extraction. Concepts with identical names merge.
/// A base with nothing outstanding is returned unchanged without any
/// provider call.
pub fn populate(
    gateway: &Gateway,
    kb: &KnowledgeBase,
    opts: &PopulateOptions,
) -> Result<PopulateOutcome, PopulateError> {
    let work = outstanding(kb);
    let mut report = PopulateReport {
        outstanding: work.len(),
        ..PopulateReport::default()
    };
    if work.is_empty() {
        return Ok(PopulateOutcome {
            kb: kb.clone(),
            report,
        });
    }

    let mut done: BTreeMap<String, TaskOutput> = BTreeMap::new();
    if let Some(cp) = &opts.checkpoint {
        if opts.resume {
            let wanted: BTreeSet<&str> = work.iter().map(|w| w.definition.identifier.as_str()).collect();
            done = read_checkpoint(cp)?;
            done.retain(|k, _| wanted.contains(k.as_str()));
            report.resumed = done.len();
        } else if cp.exists() {
            fs::remove_file(cp).map_err(|source| PopulateError::Checkpoint {
                path: cp.clone(),
                source,
            })?;
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .expect("thread pool");
    let todo: Vec<&WorkItem<'_>> = work
        .iter()
        .filter(|w| !done.contains_key(&w.definition.identifier))
        .collect();
    let mut failures: BTreeMap<String, SkipEntry> = BTreeMap::new();
    for batch in todo.chunks(opts.checkpoint_every.max(1)) {
        if opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) {
            return Err(PopulateError::Interrupted {
                completed: done.len(),
            });
        }
        let results: Vec<Result<TaskOutput, PopulateError>> =
            pool.install(|| batch.par_iter().map(|w| run_task(gateway, w, opts)).collect());
        let mut fresh = Vec::new();
        for (item, r) in batch.iter().zip(results) {
            match r {
                Ok(t) => fresh.push(t),
                Err(e) => {
                    tracing::warn!("skipping {}: {e}", item.definition.identifier);
                    failures.insert(
                        item.definition.identifier.clone(),
                        SkipEntry {
                            identifier: item.definition.identifier.clone(),
                            stage: e.stage().to_string(),
                            error: e.to_string(),
                        },
                    );
                }
            }
        }
        if let Some(cp) = &opts.checkpoint {
            append_checkpoint(cp, &fresh.iter().collect::<Vec<_>>())?;
        }
        for t in fresh {
            done.insert(t.identifier.clone(), t);
        }
    }
    report.completed = done.len();
    report.skipped = failures.into_values().collect();
    let ratio = report.completed as f64 / report.outstanding as f64;
    if ratio < opts.success_ratio {
        return Err(PopulateError::BelowThreshold {
            completed: report.completed,
            total: report.outstanding,
            required: opts.success_ratio,
            skipped: report.skipped,
        });
    }

    let kb = assemble(kb, done.values(), &mut report)?;
    Ok(PopulateOutcome { kb, report })
}

/// Single-threaded reduce over task outputs in identifier order.
fn assemble<'a>(
    kb: &KnowledgeBase,
    outputs: impl Iterator<Item = &'a TaskOutput>,
    report: &mut PopulateReport,
) -> Result<KnowledgeBase, PopulateError> {
    let existing_links: BTreeMap<&str, &ConceptLink> =
        kb.links.iter().map(|l| (l.concept_id.as_str(), l)).collect();
    let existing_concepts: BTreeSet<&str> = kb.concepts.iter().map(|c| c.id.as_str()).collect();
    let mut concepts: BTreeMap<String, Concept> = BTreeMap::new();
    let mut links: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut descriptions = Vec::new();
    for t in outputs {
        report.fallback_selections += usize::from(t.fallback);
        report.extraction_retries += t.retries as usize;
        report
            .dropped_candidates
            .extend(t.dropped.iter().map(|&slot| DroppedCandidate {
                identifier: t.identifier.clone(),
                slot,
            }));
        let cid = t.concept.id.clone();
        if !existing_concepts.contains(cid.as_str()) {
            concepts.entry(cid.clone()).or_insert_with(|| t.concept.clone());
        }
        links
            .entry(cid.clone())
            .or_insert_with(|| {
                existing_links
                    .get(cid.as_str())
                    .map(|l| l.description_ids.clone())
                    .unwrap_or_default()
            })
            .insert(t.description.id.clone());
        descriptions.push(t.description.clone());
    }
    let upsert = Upsert {
        concepts: concepts.into_values().collect(),
        definitions: Vec::new(),
        descriptions,
        links: links
            .into_iter()
            .map(|(concept_id, description_ids)| ConceptLink {
                concept_id,
                description_ids,
            })
            .collect(),
    };
    Ok(upsert_entities(kb, upsert)?)
}
