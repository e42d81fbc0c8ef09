use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::KnowledgeBase;

/// One integrity problem found in a knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    EmptyField {
        entity: String,
        key: String,
        field: String,
    },
    DuplicateConceptId {
        id: String,
    },
    DuplicateDefinition {
        identifier: String,
    },
    DuplicateDescriptionId {
        id: String,
    },
    DuplicateLink {
        concept_id: String,
    },
    /// A description points at a definition that does not exist (R2).
    DanglingDescription {
        description_id: String,
        definition_id: String,
    },
    /// A definition has more than one description (R2 is one-to-one).
    DescriptionMultiplicity {
        definition_id: String,
        description_ids: Vec<String>,
    },
    MissingDescription {
        definition_id: String,
    },
    DanglingLinkConcept {
        concept_id: String,
    },
    DanglingLinkDescription {
        concept_id: String,
        description_id: String,
    },
    EmptyLink {
        concept_id: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyField { entity, key, field } => {
                write!(f, "{entity} {key:?}: empty {field}")
            }
            Violation::DuplicateConceptId { id } => write!(f, "duplicate concept id {id}"),
            Violation::DuplicateDefinition { identifier } => {
                write!(f, "duplicate definition identifier {identifier}")
            }
            Violation::DuplicateDescriptionId { id } => write!(f, "duplicate description id {id}"),
            Violation::DuplicateLink { concept_id } => {
                write!(f, "concept {concept_id} has more than one link record")
            }
            Violation::DanglingDescription {
                description_id,
                definition_id,
            } => write!(
                f,
                "description {description_id} references unknown definition {definition_id}"
            ),
            Violation::DescriptionMultiplicity {
                definition_id,
                description_ids,
            } => write!(
                f,
                "definition {definition_id} has {} descriptions: {}",
                description_ids.len(),
                description_ids.join(", ")
            ),
            Violation::MissingDescription { definition_id } => {
                write!(f, "definition {definition_id} has no description")
            }
            Violation::DanglingLinkConcept { concept_id } => {
                write!(f, "link references unknown concept {concept_id}")
            }
            Violation::DanglingLinkDescription {
                concept_id,
                description_id,
            } => write!(
                f,
                "link from {concept_id} references unknown description {description_id}"
            ),
            Violation::EmptyLink { concept_id } => {
                write!(f, "link from {concept_id} has no descriptions")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} violations", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

fn blank(s: &str) -> bool {
    s.trim().is_empty()
}

fn empty_field(entity: &str, key: &str, field: &str) -> Violation {
    Violation::EmptyField {
        entity: entity.to_string(),
        key: key.to_string(),
        field: field.to_string(),
    }
}

fn duplicates<'a>(keys: impl Iterator<Item = &'a str>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for k in keys {
        if !seen.insert(k) {
            dup.insert(k);
        }
    }
    dup
}

/// Checks referential integrity of R1 (concept links) and R2 (one
/// description per definition) plus required fields. The report is sorted,
/// so permuting the collections of `kb` never changes it.
pub fn validate(kb: &KnowledgeBase) -> ValidationReport {
    let mut out = Vec::new();

    for c in &kb.concepts {
        if blank(&c.id) {
            out.push(empty_field("concept", &c.name, "id"));
        }
        if blank(&c.name) {
            out.push(empty_field("concept", &c.id, "name"));
        }
        if blank(&c.explanation) {
            out.push(empty_field("concept", &c.id, "explanation"));
        }
    }
    for d in &kb.definitions {
        if blank(&d.identifier) {
            out.push(empty_field("definition", &d.module_path, "identifier"));
        }
    }
    for d in &kb.descriptions {
        if blank(&d.id) {
            out.push(empty_field("description", &d.definition_id, "id"));
        }
        if !d.is_pending() && blank(&d.annotation) {
            out.push(empty_field("description", &d.id, "annotation"));
        }
    }

    out.extend(
        duplicates(kb.concepts.iter().map(|c| c.id.as_str()))
            .into_iter()
            .map(|id| Violation::DuplicateConceptId { id: id.into() }),
    );
    out.extend(
        duplicates(kb.definitions.iter().map(|d| d.identifier.as_str()))
            .into_iter()
            .map(|identifier| Violation::DuplicateDefinition {
                identifier: identifier.into(),
            }),
    );
    out.extend(
        duplicates(kb.descriptions.iter().map(|d| d.id.as_str()))
            .into_iter()
            .map(|id| Violation::DuplicateDescriptionId { id: id.into() }),
    );
    out.extend(
        duplicates(kb.links.iter().map(|l| l.concept_id.as_str()))
            .into_iter()
            .map(|id| Violation::DuplicateLink {
                concept_id: id.into(),
            }),
    );

    // R2
    let definition_ids: BTreeSet<&str> =
        kb.definitions.iter().map(|d| d.identifier.as_str()).collect();
    let mut by_definition: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for d in &kb.descriptions {
        if definition_ids.contains(d.definition_id.as_str()) {
            by_definition
                .entry(d.definition_id.as_str())
                .or_default()
                .push(d.id.clone());
        } else {
            out.push(Violation::DanglingDescription {
                description_id: d.id.clone(),
                definition_id: d.definition_id.clone(),
            });
        }
    }
    for id in &definition_ids {
        match by_definition.get(id) {
            None => out.push(Violation::MissingDescription {
                definition_id: id.to_string(),
            }),
            Some(ids) if ids.len() > 1 => {
                let mut ids = ids.clone();
                ids.sort();
                out.push(Violation::DescriptionMultiplicity {
                    definition_id: id.to_string(),
                    description_ids: ids,
                });
            }
            Some(_) => {}
        }
    }

    // R1
    let concept_ids: BTreeSet<&str> = kb.concepts.iter().map(|c| c.id.as_str()).collect();
    let description_ids: BTreeSet<&str> = kb.descriptions.iter().map(|d| d.id.as_str()).collect();
    for link in &kb.links {
        if !concept_ids.contains(link.concept_id.as_str()) {
            out.push(Violation::DanglingLinkConcept {
                concept_id: link.concept_id.clone(),
            });
        }
        if link.description_ids.is_empty() {
            out.push(Violation::EmptyLink {
                concept_id: link.concept_id.clone(),
            });
        }
        for did in &link.description_ids {
            if !description_ids.contains(did.as_str()) {
                out.push(Violation::DanglingLinkDescription {
                    concept_id: link.concept_id.clone(),
                    description_id: did.clone(),
                });
            }
        }
    }

    out.sort();
    ValidationReport { violations: out }
}
