//! Concept-definition knowledge base.
//!
//! Three entity kinds make up the base: [`Concept`]s (abstract mathematical
//! notions with a gloss), [`Definition`]s (formal library declarations) and
//! [`Description`]s (natural-language annotations, exactly one per
//! definition). [`ConceptLink`]s attach a concept to one or more
//! descriptions, so a single concept can fan out to many definitions.

mod persist;
mod store;
mod upsert;
mod validate;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::util::content_id;

pub use persist::{load, save, FORMAT_TAG};
pub use store::{CommitOutcome, KbStore};
pub use upsert::{upsert_entities, Upsert};
pub use validate::{validate, ValidationReport, Violation};

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("knowledge base failed validation with {} violation(s)", .0.violations.len())]
    Invalid(ValidationReport),
    #[error("upsert rejected: {} violation(s) would result", .0.violations.len())]
    Rejected(ValidationReport),
}

/// Declaration kinds retained from the library export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefinitionKind {
    Def,
    Class,
    Structure,
}

impl DefinitionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefinitionKind::Def => "def",
            DefinitionKind::Class => "class",
            DefinitionKind::Structure => "structure",
        }
    }
}

impl fmt::Display for DefinitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefinitionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "def" => Ok(DefinitionKind::Def),
            "class" => Ok(DefinitionKind::Class),
            "structure" => Ok(DefinitionKind::Structure),
            other => Err(format!("not a definitional kind: {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
    pub domain: String,
    pub explanation: String,
}

impl Concept {
    /// Builds a concept whose id is derived from its name, so concepts with
    /// byte-identical names collapse to the same id.
    pub fn new(
        name: impl Into<String>,
        domain: impl Into<String>,
        explanation: impl Into<String>,
    ) -> Self {
        let name = name.into();
        Concept {
            id: concept_id(&name),
            name,
            domain: domain.into(),
            explanation: explanation.into(),
        }
    }
}

pub fn concept_id(name: &str) -> String {
    content_id("con", &[name, ""])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Definition {
    pub identifier: String,
    pub formal_expression: String,
    pub module_path: String,
    pub kind: DefinitionKind,
}

/// Where a description's annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionOrigin {
    /// Doc string shipped with the library.
    Library,
    /// Selected back-translation of the formal expression.
    BackTranslated,
    /// Placeholder awaiting back-translation; the annotation may be empty.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub id: String,
    pub definition_id: String,
    pub annotation: String,
    pub origin: DescriptionOrigin,
}

impl Description {
    pub fn new(
        definition: &Definition,
        annotation: impl Into<String>,
        origin: DescriptionOrigin,
    ) -> Self {
        Description {
            id: description_id(&definition.identifier, &definition.module_path),
            definition_id: definition.identifier.clone(),
            annotation: annotation.into(),
            origin,
        }
    }

    pub fn pending(definition: &Definition) -> Self {
        Description::new(definition, "", DescriptionOrigin::Pending)
    }

    pub fn is_pending(&self) -> bool {
        self.origin == DescriptionOrigin::Pending
    }
}

pub fn description_id(identifier: &str, module_path: &str) -> String {
    content_id("desc", &[identifier, module_path])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLink {
    pub concept_id: String,
    pub description_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub version: u64,
    pub source_fingerprint: String,
    pub concepts: Vec<Concept>,
    pub definitions: Vec<Definition>,
    pub descriptions: Vec<Description>,
    pub links: Vec<ConceptLink>,
}

impl KnowledgeBase {
    pub fn empty() -> Self {
        KnowledgeBase::default()
    }

    /// Sorts every collection by its key. Two knowledge bases with the same
    /// content serialize to the same bytes once canonicalized.
    pub fn canonicalize(&mut self) {
        self.concepts.sort_by(|a, b| a.id.cmp(&b.id));
        self.definitions
            .sort_by(|a, b| a.identifier.cmp(&b.identifier));
        self.descriptions.sort_by(|a, b| a.id.cmp(&b.id));
        self.links.sort_by(|a, b| a.concept_id.cmp(&b.concept_id));
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }

    pub fn pending_count(&self) -> usize {
        self.descriptions.iter().filter(|d| d.is_pending()).count()
    }

    /// True when the base has content, no pending placeholders, and every
    /// description is reachable from some concept.
    pub fn is_populated(&self) -> bool {
        if self.concepts.is_empty() || self.definitions.is_empty() || self.pending_count() > 0 {
            return false;
        }
        let linked: BTreeSet<&str> = self
            .links
            .iter()
            .flat_map(|l| l.description_ids.iter().map(String::as_str))
            .collect();
        self.descriptions
            .iter()
            .all(|d| linked.contains(d.id.as_str()))
    }

    pub fn view(&self) -> KbView<'_> {
        KbView::new(self)
    }
}

/// Read-only lookup tables over a knowledge base.
#[derive(Debug)]
pub struct KbView<'a> {
    pub kb: &'a KnowledgeBase,
    definitions: HashMap<&'a str, &'a Definition>,
    description_by_id: HashMap<&'a str, &'a Description>,
    description_by_definition: HashMap<&'a str, &'a Description>,
    concept_by_id: HashMap<&'a str, &'a Concept>,
    concept_by_name: HashMap<&'a str, &'a Concept>,
    link_by_concept: HashMap<&'a str, &'a ConceptLink>,
}

impl<'a> KbView<'a> {
    fn new(kb: &'a KnowledgeBase) -> Self {
        KbView {
            kb,
            definitions: kb
                .definitions
                .iter()
                .map(|d| (d.identifier.as_str(), d))
                .collect(),
            description_by_id: kb.descriptions.iter().map(|d| (d.id.as_str(), d)).collect(),
            description_by_definition: kb
                .descriptions
                .iter()
                .map(|d| (d.definition_id.as_str(), d))
                .collect(),
            concept_by_id: kb.concepts.iter().map(|c| (c.id.as_str(), c)).collect(),
            concept_by_name: kb.concepts.iter().map(|c| (c.name.as_str(), c)).collect(),
            link_by_concept: kb.links.iter().map(|l| (l.concept_id.as_str(), l)).collect(),
        }
    }

    pub fn definition(&self, identifier: &str) -> Option<&'a Definition> {
        self.definitions.get(identifier).copied()
    }

    pub fn description(&self, id: &str) -> Option<&'a Description> {
        self.description_by_id.get(id).copied()
    }

    pub fn description_for(&self, identifier: &str) -> Option<&'a Description> {
        self.description_by_definition.get(identifier).copied()
    }

    pub fn concept(&self, id: &str) -> Option<&'a Concept> {
        self.concept_by_id.get(id).copied()
    }

    pub fn concept_by_name(&self, name: &str) -> Option<&'a Concept> {
        self.concept_by_name.get(name).copied()
    }

    /// Identifiers of every definition reachable from the named concept,
    /// sorted ascending.
    pub fn definitions_for_concept(&self, name: &str) -> Vec<&'a str> {
        let Some(concept) = self.concept_by_name(name) else {
            return Vec::new();
        };
        let Some(link) = self.link_by_concept.get(concept.id.as_str()) else {
            return Vec::new();
        };
        let mut out: Vec<&'a str> = link
            .description_ids
            .iter()
            .filter_map(|id| self.description(id))
            .map(|d| d.definition_id.as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}
