use std::collections::BTreeMap;

use super::{validate, Concept, ConceptLink, Definition, Description, KbError, KnowledgeBase};

/// Entities to merge into a knowledge base. Each entity replaces any existing
/// entity with the same key (concept id, definition identifier, description
/// id, link concept id).
#[derive(Debug, Clone, Default)]
pub struct Upsert {
    pub concepts: Vec<Concept>,
    pub definitions: Vec<Definition>,
    pub descriptions: Vec<Description>,
    pub links: Vec<ConceptLink>,
}

impl Upsert {
    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
            && self.definitions.is_empty()
            && self.descriptions.is_empty()
            && self.links.is_empty()
    }
}

fn merge<T: Clone>(existing: &[T], incoming: Vec<T>, key: impl Fn(&T) -> String) -> Vec<T> {
    let mut by_key: BTreeMap<String, T> = existing.iter().map(|e| (key(e), e.clone())).collect();
    for e in incoming {
        by_key.insert(key(&e), e);
    }
    by_key.into_values().collect()
}

/// Returns a new knowledge base with `upsert` merged in and the version
/// bumped. The input is never modified; if the merged base would fail
/// validation nothing is applied and the report is returned.
pub fn upsert_entities(kb: &KnowledgeBase, upsert: Upsert) -> Result<KnowledgeBase, KbError> {
    let merged = KnowledgeBase {
        version: kb.version + 1,
        source_fingerprint: kb.source_fingerprint.clone(),
        concepts: merge(&kb.concepts, upsert.concepts, |c| c.id.clone()),
        definitions: merge(&kb.definitions, upsert.definitions, |d| d.identifier.clone()),
        descriptions: merge(&kb.descriptions, upsert.descriptions, |d| d.id.clone()),
        links: merge(&kb.links, upsert.links, |l| l.concept_id.clone()),
    }
    .canonicalized();
    let report = validate(&merged);
    if report.is_valid() {
        Ok(merged)
    } else {
        Err(KbError::Rejected(report))
    }
}
