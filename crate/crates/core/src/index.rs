//! Knowledge units and the exact cosine index over them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::kb::KnowledgeBase;
use crate::provider::{dot, EmbeddingVector, Gateway, ProviderError};
use crate::util::write_atomic;

/// `(concept name, definition identifier, concept vector, description vector)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeUnit {
    pub concept_name: String,
    pub definition_identifier: String,
    pub concept_vector: EmbeddingVector,
    pub description_vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedUnit {
    pub concept_name: String,
    pub definition_identifier: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct Encoded {
    pub units: Vec<KnowledgeUnit>,
    pub skipped: Vec<SkippedUnit>,
}

/// Embeds each distinct text once. A failing batch is retried text by text
/// so one bad text only costs its own units.
fn embed_all(
    gateway: &Gateway,
    texts: Vec<String>,
) -> BTreeMap<String, Result<EmbeddingVector, ProviderError>> {
    let mut out = BTreeMap::new();
    match gateway.embed(&texts) {
        Ok(vs) => {
            for (t, v) in texts.into_iter().zip(vs) {
                out.insert(t, Ok(v));
            }
        }
        Err(_) => {
            for t in texts {
                let r = gateway.embed_one(&t);
                out.insert(t, r);
            }
        }
    }
    out
}

/// One unit per (concept link, linked description): the concept side
/// embeds the concept's explanation, the description side its annotation.
pub fn encode_units(gateway: &Gateway, kb: &KnowledgeBase) -> Encoded {
    let view = kb.view();
    let mut pairs = Vec::new();
    for link in &kb.links {
        let Some(concept) = view.concept(&link.concept_id) else {
            continue;
        };
        for did in &link.description_ids {
            if let Some(desc) = view.description(did) {
                pairs.push((concept, desc));
            }
        }
    }
    let mut texts: Vec<String> = pairs
        .iter()
        .flat_map(|(c, d)| [c.explanation.clone(), d.annotation.clone()])
        .collect();
    texts.sort();
    texts.dedup();
    let vectors = embed_all(gateway, texts);
    let lookup = |t: &str| -> Result<EmbeddingVector, String> {
        match vectors.get(t) {
            Some(Ok(v)) => Ok(v.clone()),
            Some(Err(e)) => Err(e.to_string()),
            None => Err("text at index 0 is empty".into()),
        }
    };
    let mut encoded = Encoded::default();
    for (c, d) in pairs {
        match lookup(&c.explanation).and_then(|cv| Ok((cv, lookup(&d.annotation)?))) {
            Ok((concept_vector, description_vector)) => encoded.units.push(KnowledgeUnit {
                concept_name: c.name.clone(),
                definition_identifier: d.definition_id.clone(),
                concept_vector,
                description_vector,
            }),
            Err(error) => {
                tracing::warn!("unit {} / {} skipped: {error}", c.name, d.definition_id);
                encoded.skipped.push(SkippedUnit {
                    concept_name: c.name.clone(),
                    definition_identifier: d.definition_id.clone(),
                    error,
                })
            }
        }
    }
    encoded
        .units
        .sort_by(|a, b| {
            (a.concept_name.as_str(), a.definition_identifier.as_str())
                .cmp(&(b.concept_name.as_str(), b.definition_identifier.as_str()))
        });
    encoded
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexSide {
    Concept,
    Description,
}

impl std::str::FromStr for IndexSide {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "concept" => Ok(IndexSide::Concept),
            "description" => Ok(IndexSide::Description),
            other => Err(format!("unknown index side {other:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index from zero units")]
    Empty,
    #[error("invalid index input: {0}")]
    Input(String),
    #[error("index file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("index file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<'a> {
    pub unit: &'a KnowledgeUnit,
    pub score: f64,
}

/// Exact cosine index. Rows are stored contiguously and unit-normalized.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    side: IndexSide,
    dim: usize,
    model_tag: String,
    units: Vec<KnowledgeUnit>,
    rows: Vec<f32>,
}

fn renormalized(v: &EmbeddingVector) -> Vec<f32> {
    let n = v.norm();
    v.values.iter().map(|x| (f64::from(*x) / n) as f32).collect()
}

/// Builds an index over `units`; both vectors of every unit are
/// renormalized on insert.
pub fn build_index(mut units: Vec<KnowledgeUnit>, side: IndexSide) -> Result<VectorIndex, IndexError> {
    let first = units.first().ok_or(IndexError::Empty)?;
    let pick = |u: &KnowledgeUnit| match side {
        IndexSide::Concept => u.concept_vector.clone(),
        IndexSide::Description => u.description_vector.clone(),
    };
    let (dim, model_tag) = {
        let v = pick(first);
        (v.dim(), v.model_tag)
    };
    let mut rows = Vec::with_capacity(units.len() * dim);
    for u in &units {
        for v in [&u.concept_vector, &u.description_vector] {
            if v.dim() != dim || v.model_tag != model_tag {
                return Err(IndexError::Input(format!(
                    "unit {} / {} has a vector of dim {} from {:?}, index is dim {dim} from {model_tag:?}",
                    u.concept_name,
                    u.definition_identifier,
                    v.dim(),
                    v.model_tag
                )));
            }
        }
    }
    for u in &mut units {
        for v in [&mut u.concept_vector, &mut u.description_vector] {
            if v.norm() == 0.0 || !v.norm().is_finite() {
                return Err(IndexError::Input(format!(
                    "unit {} has a zero vector",
                    u.definition_identifier
                )));
            }
            v.values = renormalized(v);
        }
        rows.extend_from_slice(&pick(u).values);
    }
    Ok(VectorIndex {
        side,
        dim,
        model_tag,
        units,
        rows,
    })
}

impl VectorIndex {
    pub fn side(&self) -> IndexSide {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn units(&self) -> &[KnowledgeUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self, query: &EmbeddingVector) -> Result<Vec<f32>, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::Input(format!(
                "query has dim {}, index has dim {}",
                query.dim(),
                self.dim
            )));
        }
        if query.model_tag != self.model_tag {
            return Err(IndexError::Input(format!(
                "query embedded by {:?}, index by {:?}",
                query.model_tag, self.model_tag
            )));
        }
        if query.norm() == 0.0 {
            return Err(IndexError::Input("query vector is zero".into()));
        }
        Ok(renormalized(query))
    }

    /// Cosine score of every unit, in unit order.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        let q = self.check(query)?;
        Ok((0..self.units.len()).map(|i| dot(&q, self.row(i))).collect())
    }

    /// Top-`k` units by cosine, descending; ties by definition identifier.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit<'_>>, IndexError> {
        if k == 0 {
            return Err(IndexError::Input("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut hits: Vec<Hit<'_>> = self
            .units
            .iter()
            .zip(scores)
            .map(|(unit, score)| Hit { unit, score })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.unit.definition_identifier.cmp(&b.unit.definition_identifier))
                .then_with(|| a.unit.concept_name.cmp(&b.unit.concept_name))
        });
        hits.truncate(k);
        Ok(hits)
    }

    /// Top-`k` distinct concept names, each scored by its best unit;
    /// ties by name.
    pub fn search_concepts(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<(String, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::Input("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for (u, s) in self.units.iter().zip(scores) {
            let e = best.entry(u.concept_name.as_str()).or_insert(f64::NEG_INFINITY);
            if s > *e {
                *e = s;
            }
        }
        let mut out: Vec<(String, f64)> = best.into_iter().map(|(n, s)| (n.to_string(), s)).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.truncate(k);
        Ok(out)
    }
}

const MAGIC: &[u8; 8] = b"CRAMFIX1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dim: usize,
    side: IndexSide,
    metric: String,
    count: usize,
    model_tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnitRecord {
    concept_name: String,
    definition_identifier: String,
    /// The vector of the side not stored in the row block.
    other_vector: Vec<f32>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".units.jsonl");
    PathBuf::from(s)
}

impl VectorIndex {
    /// Writes the binary row file and its unit sidecar, both atomically.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let header = serde_json::to_vec(&Header {
            dim: self.dim,
            side: self.side,
            metric: "cosine".into(),
            count: self.units.len(),
            model_tag: self.model_tag.clone(),
        })
        .expect("header serializes");
        let mut bytes = Vec::with_capacity(16 + header.len() + self.rows.len() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for x in &self.rows {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let mut side = String::new();
        for u in &self.units {
            let other = match self.side {
                IndexSide::Concept => &u.description_vector,
                IndexSide::Description => &u.concept_vector,
            };
            side.push_str(
                &serde_json::to_string(&UnitRecord {
                    concept_name: u.concept_name.clone(),
                    definition_identifier: u.definition_identifier.clone(),
                    other_vector: other.values.clone(),
                })
                .expect("unit serializes"),
            );
            side.push('\n');
        }
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| IndexError::Io { path: p, source }
        };
        let sc = sidecar_path(path);
        write_atomic(&sc, side.as_bytes()).map_err(io(&sc))?;
        write_atomic(path, &bytes).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<VectorIndex, IndexError> {
        let bad = |message: String| IndexError::Format {
            path: path.to_path_buf(),
            message,
        };
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not an index file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(format!("header: {e}")))?;
        if bytes.len() != body + header.count * header.dim * 4 {
            return Err(bad(format!(
                "expected {} rows of dim {}, found {} bytes of row data",
                header.count,
                header.dim,
                bytes.len() - body
            )));
        }
        let rows: Vec<f32> = bytes[body..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let sc = sidecar_path(path);
        let text = fs::read_to_string(&sc).map_err(|source| IndexError::Io {
            path: sc.clone(),
            source,
        })?;
        let records: Vec<UnitRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| IndexError::Format {
                    path: sc.clone(),
                    message: format!("line {}: {e}", i + 1),
                })
            })
            .collect::<Result<_, _>>()?;
        if records.len() != header.count {
            return Err(bad(format!(
                "sidecar has {} units, header says {}",
                records.len(),
                header.count
            )));
        }
        let vec = |values: Vec<f32>| EmbeddingVector {
            values,
            model_tag: header.model_tag.clone(),
        };
        let units = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let stored = vec(rows[i * header.dim..(i + 1) * header.dim].to_vec());
                let other = vec(r.other_vector);
                let (concept_vector, description_vector) = match header.side {
                    IndexSide::Concept => (stored, other),
                    IndexSide::Description => (other, stored),
                };
                KnowledgeUnit {
                    concept_name: r.concept_name,
                    definition_identifier: r.definition_identifier,
                    concept_vector,
                    description_vector,
                }
            })
            .collect();
        Ok(VectorIndex {
            side: header.side,
            dim: header.dim,
            model_tag: header.model_tag,
            units,
            rows,
        })
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EmbeddingVector::normalized(&raw, "rand").unwrap()
    }

    pub fn random_units(seed: u64, n: usize, dim: usize) -> Vec<KnowledgeUnit> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| KnowledgeUnit {
                concept_name: format!("c{:03}", i % 97),
                definition_identifier: format!("def{i:04}"),
                concept_vector: random_unit(&mut rng, dim),
                description_vector: random_unit(&mut rng, dim),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::testing::*;
    use super::*;
    use crate::kb::fixtures::three_concepts;
    use crate::provider::mock::ScriptedChat;

    #[test]
    fn encode_fans_out_per_linked_description() {
        let kb = three_concepts();
        let gw = Gateway::mock(ScriptedChat::new());
        let enc = encode_units(&gw, &kb);
        let expected: usize = kb.links.iter().map(|l| l.description_ids.len()).sum();
        assert_eq!(enc.units.len(), expected);
        assert!(enc.skipped.is_empty());
        let cont: Vec<_> = enc.units.iter().filter(|u| u.concept_name == "continuity").collect();
        assert_eq!(cont.len(), 2);
        assert_eq!(cont[0].concept_vector, cont[1].concept_vector);
        for u in &enc.units {
            assert!((u.concept_vector.norm() - 1.0).abs() < 1e-6);
            assert!((u.description_vector.norm() - 1.0).abs() < 1e-6);
            assert!(kb.view().concept_by_name(&u.concept_name).is_some());
            assert!(kb.view().definition(&u.definition_identifier).is_some());
        }
    }

    #[test]
    fn empty_annotation_skips_unit() {
        let mut kb = three_concepts();
        kb.descriptions[0].annotation = String::new();
        let gw = Gateway::mock(ScriptedChat::new());
        let enc = encode_units(&gw, &kb);
        assert_eq!(enc.units.len(), 3);
        assert_eq!(enc.skipped.len(), 1);
    }

    #[test]
    fn self_match_ranks_first() {
        let units = random_units(7, 40, 16);
        let idx = build_index(units.clone(), IndexSide::Concept).unwrap();
        let hits = idx.search(&units[5].concept_vector, 3).unwrap();
        assert_eq!(hits[0].unit.definition_identifier, "def0005");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        let all = idx.search(&units[0].concept_vector, 1000).unwrap();
        assert_eq!(all.len(), 40);
        let mut ids: Vec<_> = all.iter().map(|h| h.unit.definition_identifier.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_identifier() {
        let mut units = random_units(3, 3, 8);
        let shared = units[0].concept_vector.clone();
        for (u, id) in units.iter_mut().zip(["zeta", "alpha", "mid"]) {
            u.concept_vector = shared.clone();
            u.definition_identifier = id.into();
        }
        let idx = build_index(units, IndexSide::Concept).unwrap();
        let ids: Vec<_> = idx
            .search(&shared, 3)
            .unwrap()
            .iter()
            .map(|h| h.unit.definition_identifier.as_str())
            .collect();
        assert_eq!(ids, vec!["alpha", "mid", "zeta"]);
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let idx = build_index(random_units(1, 5, 8), IndexSide::Description).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_unit(&mut rng, 9);
        assert!(matches!(idx.search(&q, 2), Err(IndexError::Input(_))));
        assert!(matches!(build_index(Vec::new(), IndexSide::Concept), Err(IndexError::Empty)));
    }

    #[test]
    fn concept_search_groups_units() {
        let units = random_units(11, 200, 12);
        let idx = build_index(units.clone(), IndexSide::Concept).unwrap();
        let q = units[17].concept_vector.clone();
        let got = idx.search_concepts(&q, 10).unwrap();
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for u in &units {
            let s = u.concept_vector.cosine(&q).unwrap();
            let e = best.entry(u.concept_name.clone()).or_insert(f64::MIN);
            *e = e.max(s);
        }
        let mut want: Vec<(String, f64)> = best.into_iter().collect();
        want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        want.truncate(10);
        assert_eq!(got.len(), 10);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.0, w.0);
            assert!((g.1 - w.1).abs() < 1e-6);
        }
    }

    #[test]
    fn persistence_round_trips() {
        let units = random_units(5, 30, 16);
        let dir = tempfile::tempdir().unwrap();
        for side in [IndexSide::Concept, IndexSide::Description] {
            let idx = build_index(units.clone(), side).unwrap();
            let p = dir.path().join("idx.bin");
            idx.save(&p).unwrap();
            let back = VectorIndex::load(&p).unwrap();
            assert_eq!(back.side(), side);
            assert_eq!(back.units(), idx.units());
            let q = &units[3].description_vector;
            let a: Vec<_> = idx.search(q, 5).unwrap().iter().map(|h| (h.unit.definition_identifier.clone(), h.score)).collect();
            let b: Vec<_> = back.search(q, 5).unwrap().iter().map(|h| (h.unit.definition_identifier.clone(), h.score)).collect();
            assert_eq!(a, b);
        }
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, b"nope").unwrap();
        assert!(matches!(VectorIndex::load(&p), Err(IndexError::Format { .. })));
    }
}
