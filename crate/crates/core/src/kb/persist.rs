//! Line-delimited knowledge-base file.
//!
//! Layout: a header record, then one typed record per entity in canonical
//! order, then an end record carrying the entity count. A file without the
//! end record is treated as truncated.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate, Concept, ConceptLink, Definition, Description, KbError, KnowledgeBase};
use crate::util::write_atomic;

pub const FORMAT_TAG: &str = "cramf-kb/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u64,
        source_fingerprint: String,
    },
    Concept(Concept),
    Definition(Definition),
    Description(Description),
    Link(ConceptLink),
    End {
        entities: usize,
    },
}

impl KnowledgeBase {
    /// Canonical serialization; byte-equal for content-equal bases.
    pub fn to_canonical_string(&self) -> String {
        let kb = self.clone().canonicalized();
        let mut lines = Vec::with_capacity(
            2 + kb.concepts.len() + kb.definitions.len() + kb.descriptions.len() + kb.links.len(),
        );
        let push = |lines: &mut Vec<String>, r: Record| {
            lines.push(serde_json::to_string(&r).expect("records serialize"));
        };
        push(
            &mut lines,
            Record::Header {
                format: FORMAT_TAG.to_string(),
                version: kb.version,
                source_fingerprint: kb.source_fingerprint.clone(),
            },
        );
        let entities =
            kb.concepts.len() + kb.definitions.len() + kb.descriptions.len() + kb.links.len();
        for c in kb.concepts {
            push(&mut lines, Record::Concept(c));
        }
        for d in kb.definitions {
            push(&mut lines, Record::Definition(d));
        }
        for d in kb.descriptions {
            push(&mut lines, Record::Description(d));
        }
        for l in kb.links {
            push(&mut lines, Record::Link(l));
        }
        push(&mut lines, Record::End { entities });
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Parses the line format without running integrity validation.
    pub fn parse_unchecked(text: &str) -> Result<KnowledgeBase, KbError> {
        let mut kb = KnowledgeBase::empty();
        let mut saw_header = false;
        let mut end: Option<(usize, usize)> = None;
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            if raw.trim().is_empty() {
                continue;
            }
            if let Some((end_line, _)) = end {
                return Err(KbError::Parse {
                    line,
                    message: format!("content after end record on line {end_line}"),
                });
            }
            let record: Record = serde_json::from_str(raw).map_err(|e| KbError::Parse {
                line,
                message: e.to_string(),
            })?;
            match record {
                Record::Header {
                    format,
                    version,
                    source_fingerprint,
                } => {
                    if saw_header {
                        return Err(KbError::Parse {
                            line,
                            message: "duplicate header".into(),
                        });
                    }
                    if format != FORMAT_TAG {
                        return Err(KbError::Parse {
                            line,
                            message: format!("unsupported format {format:?}"),
                        });
                    }
                    saw_header = true;
                    kb.version = version;
                    kb.source_fingerprint = source_fingerprint;
                    continue;
                }
                _ if !saw_header => {
                    return Err(KbError::Parse {
                        line,
                        message: "record before header".into(),
                    })
                }
                Record::Concept(c) => kb.concepts.push(c),
                Record::Definition(d) => kb.definitions.push(d),
                Record::Description(d) => kb.descriptions.push(d),
                Record::Link(l) => kb.links.push(l),
                Record::End { entities } => end = Some((line, entities)),
            }
        }
        if !saw_header {
            return Err(KbError::Parse {
                line: last_line.max(1),
                message: "missing header record".into(),
            });
        }
        let Some((end_line, expected)) = end else {
            return Err(KbError::Parse {
                line: last_line + 1,
                message: "truncated: missing end record".into(),
            });
        };
        let actual =
            kb.concepts.len() + kb.definitions.len() + kb.descriptions.len() + kb.links.len();
        if actual != expected {
            return Err(KbError::Parse {
                line: end_line,
                message: format!("end record declares {expected} entities, found {actual}"),
            });
        }
        Ok(kb)
    }
}

/// Validates `kb` and writes its canonical form atomically.
pub fn save(kb: &KnowledgeBase, path: &Path) -> Result<(), KbError> {
    let report = validate(kb);
    if !report.is_valid() {
        return Err(KbError::Invalid(report));
    }
    write_atomic(path, kb.to_canonical_string().as_bytes()).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads and validates a knowledge-base file.
pub fn load(path: &Path) -> Result<KnowledgeBase, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let kb = KnowledgeBase::parse_unchecked(&text)?;
    let report = validate(&kb);
    if !report.is_valid() {
        return Err(KbError::Invalid(report));
    }
    Ok(kb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::fixtures::three_concepts;

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let kb = three_concepts();
        save(&kb, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, kb);
        assert_eq!(back.to_canonical_string(), fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = three_concepts().to_canonical_string();
        // cut at a line boundary: end record missing
        let cut: Vec<&str> = text.lines().collect();
        let at_boundary = cut[..cut.len() - 2].join("\n");
        let err = KnowledgeBase::parse_unchecked(&at_boundary).unwrap_err();
        assert!(matches!(err, KbError::Parse { .. }), "{err}");
        // cut mid-record
        let mid = &text[..text.len() / 2];
        let err = KnowledgeBase::parse_unchecked(mid).unwrap_err();
        match err {
            KbError::Parse { line, .. } => assert!(line > 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn load_rejects_integrity_violations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let mut kb = three_concepts();
        kb.descriptions.pop();
        fs::write(&path, kb.to_canonical_string()).unwrap();
        assert!(matches!(load(&path), Err(KbError::Invalid(r)) if !r.is_valid()));
        assert!(matches!(save(&kb, &path), Err(KbError::Invalid(_))));
    }

    #[test]
    fn canonical_form_ignores_collection_order() {
        let kb = three_concepts();
        let mut shuffled = kb.clone();
        shuffled.definitions.reverse();
        shuffled.concepts.reverse();
        assert_eq!(kb.to_canonical_string(), shuffled.to_canonical_string());
    }
}
