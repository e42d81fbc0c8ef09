//! Ingest of a doc-gen4-style documentation export.
//!
//! The export is a directory tree of JSON files, one per module. Each file is
//! either an object `{"module": "...", "declarations": [...]}` or a bare
//! array of declaration objects, in which case the module path is derived
//! from the file's relative path. Declarations carry `name`, `kind`,
//! `signature` (or `type`), `doc` and `line`; unknown fields are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kb::{
    validate, Definition, DefinitionKind, Description, DescriptionOrigin, KbError, KnowledgeBase,
};
use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("export at {0} contains no parsable declarations")]
    EmptyExport(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDeclaration {
    pub name: String,
    pub kind: String,
    pub signature: String,
    pub module_path: String,
    pub doc_string: Option<String>,
    pub source_line: u64,
}

impl RawDeclaration {
    /// Doc string with surrounding whitespace removed; `None` when blank.
    pub fn trimmed_doc(&self) -> Option<&str> {
        self.doc_string
            .as_deref()
            .map(str::trim)
            .filter(|d| !d.is_empty())
    }

    pub fn definitional_kind(&self) -> Option<DefinitionKind> {
        self.kind.parse().ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_declarations: usize,
    pub kept: usize,
    pub skipped_by_kind: BTreeMap<String, usize>,
    pub missing_doc: usize,
    pub parse_errors: usize,
    /// Files that were not valid JSON at all; each also counts one parse error.
    pub unreadable_files: Vec<String>,
    pub source_fingerprint: String,
}

impl IngestReport {
    pub fn render_table(&self) -> String {
        let mut rows = vec![
            ("total declarations".to_string(), self.total_declarations),
            ("kept (def/class/structure)".to_string(), self.kept),
        ];
        for (kind, n) in &self.skipped_by_kind {
            rows.push((format!("skipped: {kind}"), *n));
        }
        rows.push(("missing doc".to_string(), self.missing_doc));
        rows.push(("parse errors".to_string(), self.parse_errors));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v:>8}\n"));
        }
        out
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ModuleFile {
    Object {
        #[serde(alias = "name")]
        module: Option<String>,
        declarations: Vec<serde_json::Value>,
    },
    Bare(Vec<serde_json::Value>),
}

#[derive(Debug, Deserialize)]
struct DeclRecord {
    name: String,
    kind: String,
    #[serde(default, alias = "type", alias = "args")]
    signature: Option<String>,
    #[serde(default, alias = "docString", alias = "doc_string")]
    doc: Option<String>,
    #[serde(default, alias = "source_line")]
    line: Option<u64>,
}

struct FileOutcome {
    decls: Vec<RawDeclaration>,
    records: usize,
    errors: usize,
    unreadable: bool,
}

fn module_from_relative(rel: &Path) -> String {
    let no_ext = rel.with_extension("");
    no_ext
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(".")
}

fn parse_file(root: &Path, path: &Path, bytes: &[u8]) -> FileOutcome {
    let rel = path.strip_prefix(root).unwrap_or(path);
    let parsed: ModuleFile = match serde_json::from_slice(bytes) {
        Ok(f) => f,
        Err(e) => {
            tracing::warn!(file = %path.display(), "unparsable export file: {e}");
            return FileOutcome {
                decls: Vec::new(),
                records: 1,
                errors: 1,
                unreadable: true,
            };
        }
    };
    let (module, values) = match parsed {
        ModuleFile::Object {
            module,
            declarations,
        } => (module, declarations),
        ModuleFile::Bare(values) => (None, values),
    };
    let module = module
        .filter(|m| !m.trim().is_empty())
        .unwrap_or_else(|| module_from_relative(rel));
    let mut out = FileOutcome {
        decls: Vec::new(),
        records: values.len(),
        errors: 0,
        unreadable: false,
    };
    for value in values {
        match serde_json::from_value::<DeclRecord>(value) {
            Ok(r) if !r.name.trim().is_empty() && !r.kind.trim().is_empty() => {
                out.decls.push(RawDeclaration {
                    name: r.name.trim().to_string(),
                    kind: r.kind.trim().to_string(),
                    signature: r.signature.unwrap_or_default(),
                    module_path: module.clone(),
                    doc_string: r.doc,
                    source_line: r.line.unwrap_or(0),
                })
            }
            _ => out.errors += 1,
        }
    }
    out
}

fn collect_files(root: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |source| IngestError::Io {
        path: root.display().to_string(),
        source,
    };
    let meta = fs::metadata(root).map_err(io)?;
    if meta.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|source| IngestError::Io {
            path: dir.display().to_string(),
            source,
        })? {
            let entry = entry.map_err(|source| IngestError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Parses every module file under `path` (a directory, or a single file).
/// Output is sorted by module path, then name, then source line.
pub fn parse_export(path: &Path) -> Result<(Vec<RawDeclaration>, IngestReport), IngestError> {
    let files = collect_files(path)?;
    let root = if path.is_file() {
        path.parent().unwrap_or(Path::new(""))
    } else {
        path
    };
    let contents: Vec<(PathBuf, Vec<u8>)> = files
        .into_iter()
        .map(|p| {
            fs::read(&p)
                .map(|b| (p.clone(), b))
                .map_err(|source| IngestError::Io {
                    path: p.display().to_string(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;

    let mut fingerprint_input = Vec::new();
    for (p, bytes) in &contents {
        let rel = p.strip_prefix(root).unwrap_or(p);
        fingerprint_input.extend_from_slice(rel.to_string_lossy().as_bytes());
        fingerprint_input.push(0);
        fingerprint_input.extend_from_slice(sha256_hex(bytes).as_bytes());
        fingerprint_input.push(b'\n');
    }

    let outcomes: Vec<FileOutcome> = contents
        .par_iter()
        .map(|(p, bytes)| parse_file(root, p, bytes))
        .collect();

    let mut report = IngestReport {
        source_fingerprint: sha256_hex(&fingerprint_input),
        ..Default::default()
    };
    let mut decls = Vec::new();
    for ((p, _), o) in contents.iter().zip(outcomes) {
        report.total_declarations += o.records;
        report.parse_errors += o.errors;
        if o.unreadable {
            let rel = p.strip_prefix(root).unwrap_or(p);
            report.unreadable_files.push(rel.display().to_string());
        }
        decls.extend(o.decls);
    }
    if decls.is_empty() {
        return Err(IngestError::EmptyExport(path.display().to_string()));
    }
    decls.sort_by(|a, b| {
        (&a.module_path, &a.name, a.source_line).cmp(&(&b.module_path, &b.name, b.source_line))
    });
    for d in &decls {
        if d.definitional_kind().is_some() {
            report.kept += 1;
            if d.trimmed_doc().is_none() {
                report.missing_doc += 1;
            }
        } else {
            *report.skipped_by_kind.entry(d.kind.clone()).or_default() += 1;
        }
    }
    Ok((decls, report))
}

/// Keeps `def`, `class` and `structure` declarations, in input order.
pub fn filter_definitional(decls: &[RawDeclaration]) -> Vec<RawDeclaration> {
    decls
        .iter()
        .filter(|d| d.definitional_kind().is_some())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateName {
    pub name: String,
    pub kept_module: String,
    pub dropped_module: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestEntities {
    pub definitions: Vec<Definition>,
    pub descriptions: Vec<Description>,
    pub duplicates: Vec<DuplicateName>,
    /// Annotations dropped when duplicates carried competing doc strings.
    pub discarded_annotations: Vec<(String, String)>,
}

/// Maps definitional declarations to definitions plus one description each.
/// Declarations without a doc string get a pending placeholder. For a
/// repeated name the first declaration is kept and the longest doc string
/// among the repeats becomes its annotation.
pub fn to_kb_entities(decls: &[RawDeclaration]) -> IngestEntities {
    let mut out = IngestEntities::default();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut docs: Vec<Option<String>> = Vec::new();

    for d in decls {
        let Some(kind) = d.definitional_kind() else {
            continue;
        };
        if let Some(&idx) = seen.get(d.name.as_str()) {
            out.duplicates.push(DuplicateName {
                name: d.name.clone(),
                kept_module: out.definitions[idx].module_path.clone(),
                dropped_module: d.module_path.clone(),
            });
            if let Some(doc) = d.trimmed_doc() {
                let slot = &mut docs[idx];
                match slot {
                    Some(existing) if existing.len() >= doc.len() => {
                        out.discarded_annotations
                            .push((d.name.clone(), doc.to_string()));
                    }
                    _ => {
                        if let Some(old) = slot.replace(doc.to_string()) {
                            out.discarded_annotations.push((d.name.clone(), old));
                        }
                    }
                }
            }
            continue;
        }
        seen.insert(&d.name, out.definitions.len());
        out.definitions.push(Definition {
            identifier: d.name.clone(),
            formal_expression: d.signature.clone(),
            module_path: d.module_path.clone(),
            kind,
        });
        docs.push(d.trimmed_doc().map(str::to_string));
    }
    for (name, doc) in &out.discarded_annotations {
        tracing::info!(definition = %name, "discarding shorter duplicate annotation ({} bytes)", doc.len());
    }

    out.descriptions = out
        .definitions
        .iter()
        .zip(docs)
        .map(|(def, doc)| match doc {
            Some(text) => Description::new(def, text, DescriptionOrigin::Library),
            None => Description::pending(def),
        })
        .collect();
    out
}

/// Assembles the version-1 knowledge base produced by an ingest run.
pub fn build_knowledge_base(
    entities: &IngestEntities,
    source_fingerprint: &str,
) -> Result<KnowledgeBase, IngestError> {
    let kb = KnowledgeBase {
        version: 1,
        source_fingerprint: source_fingerprint.to_string(),
        concepts: Vec::new(),
        definitions: entities.definitions.clone(),
        descriptions: entities.descriptions.clone(),
        links: Vec::new(),
    }
    .canonicalized();
    let report = validate(&kb);
    if !report.is_valid() {
        return Err(KbError::Invalid(report).into());
    }
    Ok(kb)
}
