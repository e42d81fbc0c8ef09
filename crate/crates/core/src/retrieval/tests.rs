use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::index::{build_index, encode_units};
use crate::kb::{validate, Concept, ConceptLink, DefinitionKind, DescriptionOrigin};
use crate::provider::mock::{CosineReranker, HashEmbedder, ScriptedChat};
use crate::provider::{RerankBackend, Vars};

fn var<'a>(v: &'a Vars, k: &str) -> &'a str {
    v.get(k).map(String::as_str).unwrap_or("")
}

type Group<'a> = (&'a str, &'a str, &'a [(&'a str, &'a str)]);

/// Builds a populated base from (concept, explanation, [(identifier,
/// annotation)]) groups.
fn kb_from(groups: &[Group<'_>]) -> KnowledgeBase {
    let mut kb = KnowledgeBase {
        version: 1,
        ..KnowledgeBase::default()
    };
    for (name, explanation, defs) in groups {
        let c = Concept::new(*name, "test", *explanation);
        let mut ids = BTreeSet::new();
        for (id, ann) in defs.iter() {
            let d = Definition {
                identifier: id.to_string(),
                formal_expression: format!("def {id} := sorry"),
                module_path: "Test".into(),
                kind: DefinitionKind::Def,
            };
            if kb.definitions.iter().all(|x| x.identifier != d.identifier) {
                let desc = Description::new(&d, *ann, DescriptionOrigin::Library);
                ids.insert(desc.id.clone());
                kb.descriptions.push(desc);
                kb.definitions.push(d);
            } else {
                ids.insert(crate::kb::description_id(id, "Test"));
            }
        }
        kb.links.push(ConceptLink {
            concept_id: c.id.clone(),
            description_ids: ids,
        });
        kb.concepts.push(c);
    }
    let kb = kb.canonicalized();
    assert!(validate(&kb).is_valid(), "{}", validate(&kb));
    kb
}

fn concept_index(gw: &Gateway, kb: &KnowledgeBase) -> VectorIndex {
    let enc = encode_units(gw, kb);
    assert!(enc.skipped.is_empty());
    build_index(enc.units, IndexSide::Concept).unwrap()
}

fn rerank_gateway(chat: ScriptedChat) -> Gateway {
    Gateway::mock(chat).with_reranker(Arc::new(CosineReranker::new(HashEmbedder::with_key(
        b"rerank",
    ))))
}

#[test]
fn explicit_problem_is_not_rewritten() {
    let chat = ScriptedChat::new().rule(ids::CLASSIFY_PROBLEM, |_| Some("CLASS: explicit".into()));
    let gw = Gateway::mock(chat);
    let mut w = Vec::new();
    let p = classify_and_rewrite(
        &gw,
        "Prove that every compact subset of a Hausdorff space is closed",
        &mut w,
    )
    .unwrap();
    assert_eq!(p.classification, Classification::Explicit);
    assert!(p.rewritten_text.is_none());
    assert!(w.is_empty());
}

#[test]
fn implicit_problem_is_rewritten() {
    let chat = ScriptedChat::new()
        .rule(ids::CLASSIFY_PROBLEM, |v| {
            var(v, "statement").contains("people").then(|| "CLASS: implicit".into())
        })
        .rule(ids::REWRITE_PROBLEM, |_| {
            Some("In every 2-colouring of the edges of the complete graph on 6 vertices there is a monochromatic triangle.".into())
        });
    let gw = Gateway::mock(chat);
    let mut w = Vec::new();
    let p = classify_and_rewrite(
        &gw,
        "Among any 6 people there are always at least 3 people who all know each other or 3 who are all strangers.",
        &mut w,
    )
    .unwrap();
    assert_eq!(p.classification, Classification::Implicit);
    assert!(p.rewritten_text.as_deref().unwrap().contains("graph"));
    assert!(p.working_text().contains("graph"));
}

#[test]
fn unusable_classifier_defaults_to_explicit() {
    let gw = Gateway::mock(ScriptedChat::new().rule(ids::CLASSIFY_PROBLEM, |_| Some("hmm".into())));
    let mut w = Vec::new();
    let p = classify_and_rewrite(&gw, "statement", &mut w).unwrap();
    assert_eq!(p.classification, Classification::Explicit);
    assert_eq!(w.len(), 1);
    assert!(classify_and_rewrite(&gw, "  ", &mut w).is_err());
}

fn explicit(text: &str) -> ProblemStatement {
    ProblemStatement {
        text: text.into(),
        rewritten_text: None,
        classification: Classification::Explicit,
    }
}

#[test]
fn query_concepts_dedup_and_cap() {
    let gw = Gateway::mock(ScriptedChat::new().rule(ids::EXTRACT_QUERY_CONCEPTS, |_| {
        Some("CONCEPT: neighborhood".into())
    }));
    let mut w = Vec::new();
    assert_eq!(
        extract_query_concepts(&gw, &explicit("s"), 5, &mut w).unwrap(),
        vec!["neighborhood"]
    );

    let gw = Gateway::mock(ScriptedChat::new().rule(ids::EXTRACT_QUERY_CONCEPTS, |_| {
        Some("CONCEPT: a\nCONCEPT: b\nCONCEPT: a\nCONCEPT: c\nCONCEPT: d\nCONCEPT: e\nCONCEPT: f".into())
    }));
    let got = extract_query_concepts(&gw, &explicit("s"), 5, &mut w).unwrap();
    assert_eq!(got, vec!["a", "b", "c", "d", "e"]);
    assert_eq!(w.len(), 1);

    let gw = Gateway::mock(
        ScriptedChat::new().rule(ids::EXTRACT_QUERY_CONCEPTS, |_| Some("nothing".into())),
    );
    assert!(matches!(
        extract_query_concepts(&gw, &explicit("s"), 5, &mut w),
        Err(RetrievalError::ConceptExtraction { replies }) if replies.len() == 2
    ));
}

#[test]
fn extraction_reads_the_rewrite() {
    let gw = Gateway::mock(ScriptedChat::new().rule(ids::EXTRACT_QUERY_CONCEPTS, |v| {
        Some(format!("CONCEPT: {}", var(v, "statement")))
    }));
    let p = ProblemStatement {
        text: "original".into(),
        rewritten_text: Some("rewritten".into()),
        classification: Classification::Implicit,
    };
    assert_eq!(
        extract_query_concepts(&gw, &p, 5, &mut Vec::new()).unwrap(),
        vec!["rewritten"]
    );
}

#[test]
fn interpretation_and_fallback() {
    let gw = Gateway::mock(ScriptedChat::new().rule(ids::INTERPRET_CONCEPT, |v| {
        Some(format!("In metric spaces, a {} is an open ball.", var(v, "concept")))
    }));
    let mut w = Vec::new();
    let a = interpret_concept(&gw, "neighborhood", "s", &mut w);
    assert!(a.contains("metric spaces"));
    assert_eq!(a, interpret_concept(&gw, "neighborhood", "s", &mut w));
    let q = AugmentedQuery::new("neighborhood", &a);
    assert!(q.query_text.starts_with("neighborhood: ") && q.query_text.ends_with(&a));

    let empty = Gateway::mock(ScriptedChat::new().rule(ids::INTERPRET_CONCEPT, |_| Some(" ".into())));
    let f = interpret_concept(&empty, "neighborhood", "s", &mut w);
    assert_eq!(f, "neighborhood");
    assert_eq!(AugmentedQuery::new("neighborhood", &f).query_text, "neighborhood");
}

fn deriv_kb() -> KnowledgeBase {
    kb_from(&[
        (
            "derivative",
            "rate of change",
            &[
                ("fderivWithin", "Fréchet derivative within a set"),
                ("deriv", "derivative of a real function"),
                ("HasDerivAt", "f has derivative f' at x"),
            ],
        ),
        ("ring", "algebraic ring", &[("Ring", "a ring"), ("Ordering", "comparison result")]),
    ])
}

#[test]
fn keyword_channel_matches_tokens() {
    let kb = deriv_kb();
    let m = KeywordMatcher::new(&kb);
    let gw = Gateway::mock(ScriptedChat::new().rule(ids::GENERATE_KEYWORDS, |_| {
        Some("KEYWORDS: `fderivWithin`, Ring".into())
    }));
    let q = AugmentedQuery::new("derivative", "derivative within a set");
    let mut w = Vec::new();
    let out = keyword_channel(&gw, &q, &m, 8, &mut w);
    assert_eq!(out.keywords, vec!["fderivWithin", "Ring"]);
    assert_eq!(out.set.identifiers().collect::<Vec<_>>(), vec!["Ring", "fderivWithin"]);
    assert!(out.set.entries.values().all(|p| p.keyword && !p.semantic));

    let deriv = m.match_keywords(&["deriv".into()]);
    assert_eq!(deriv.identifiers().collect::<Vec<_>>(), vec!["HasDerivAt", "deriv"]);
    assert!(m.match_keywords(&["topology".into()]).is_empty());

    let broken = Gateway::mock(ScriptedChat::new().rule(ids::GENERATE_KEYWORDS, |_| Some("??".into())));
    let out = keyword_channel(&broken, &q, &m, 8, &mut w);
    assert!(out.set.is_empty());
    assert_eq!(w.len(), 1);
}

#[test]
fn keywords_are_capped() {
    let gw = Gateway::mock(ScriptedChat::new().rule(ids::GENERATE_KEYWORDS, |_| {
        Some("KEYWORDS: a, b, c, d, e, f, g, h, i, j".into())
    }));
    let q = AugmentedQuery::new("x", "y");
    assert_eq!(generate_keywords(&gw, &q, 8).unwrap().len(), 8);
}

#[test]
fn semantic_self_match_and_small_kb() {
    let kb = kb_from(&[
        ("open ball", "points within distance r of a centre", &[("Metric.ball", "the open ball")]),
        ("neighborhood filter", "filter of sets containing an open set around x", &[("nhds", "neighbourhoods")]),
        ("compact set", "every open cover has a finite subcover", &[("IsCompact", "compactness")]),
        ("closed set", "complement of an open set", &[("IsClosed", "closedness"), ("closure", "closure")]),
    ]);
    let gw = Gateway::mock(ScriptedChat::new());
    let idx = concept_index(&gw, &kb);
    let view = kb.view();
    let q = AugmentedQuery {
        concept: QueryConcept {
            name: "x".into(),
            interpretation: "y".into(),
        },
        query_text: "complement of an open set".into(),
        keywords: Vec::new(),
    };
    let out = semantic_channel(&gw, &q, &idx, &view, &RetrievalSettings::default(), &mut Vec::new())
        .unwrap();
    assert_eq!(out.concepts.len(), 4);
    assert_eq!(out.concepts[0].0, "closed set");
    assert!(out.set.contains("IsClosed") && out.set.contains("closure"));
    assert_eq!(out.set.len(), 5);
    assert!(out.set.entries.values().all(|p| p.semantic && !p.keyword));

    let desc_idx = build_index(encode_units(&gw, &kb).units, IndexSide::Description).unwrap();
    assert!(semantic_channel(&gw, &q, &desc_idx, &view, &RetrievalSettings::default(), &mut Vec::new()).is_err());
}

#[test]
fn semantic_channel_matches_two_stage_oracle() {
    let names: Vec<String> = (0..50).map(|i| format!("concept {i}")).collect();
    let expls: Vec<String> = (0..50).map(|i| format!("explanation number {i} of a notion")).collect();
    let defs: Vec<Vec<(String, String)>> = (0..50)
        .map(|i| vec![(format!("Def{i}"), format!("annotation {i}"))])
        .collect();
    let def_refs: Vec<Vec<(&str, &str)>> = defs
        .iter()
        .map(|v| v.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect())
        .collect();
    let groups: Vec<Group<'_>> = (0..50)
        .map(|i| (names[i].as_str(), expls[i].as_str(), def_refs[i].as_slice()))
        .collect();
    let kb = kb_from(&groups);
    let gw = rerank_gateway(ScriptedChat::new());
    let idx = concept_index(&gw, &kb);
    let view = kb.view();
    let embed = HashEmbedder::default();
    let rerank = CosineReranker::new(HashEmbedder::with_key(b"rerank"));
    for qi in 0..10 {
        let text = format!("query about notion {qi}");
        let q = AugmentedQuery {
            concept: QueryConcept {
                name: "q".into(),
                interpretation: text.clone(),
            },
            query_text: text.clone(),
            keywords: Vec::new(),
        };
        let qv = embed.vector(&text);
        let mut stage1: Vec<(usize, f64)> = (0..50)
            .map(|i| (i, embed.vector(&expls[i]).cosine(&qv).unwrap()))
            .collect();
        stage1.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(names[a.0].cmp(&names[b.0])));
        stage1.truncate(10);
        let cand_texts: Vec<String> = stage1.iter().map(|(i, _)| expls[*i].clone()).collect();
        let scores = rerank.score(&text, &cand_texts).unwrap();
        let mut stage2: Vec<(usize, f64)> = stage1.iter().map(|(i, _)| *i).zip(scores).collect();
        let pos = |i: usize| stage1.iter().position(|(j, _)| *j == i).unwrap();
        stage2.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(pos(a.0).cmp(&pos(b.0))));
        let want: Vec<&str> = stage2.iter().take(5).map(|(i, _)| names[*i].as_str()).collect();
        let out = semantic_channel(&gw, &q, &idx, &view, &RetrievalSettings::default(), &mut Vec::new())
            .unwrap();
        let got: Vec<&str> = out.concepts.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(got, want, "query {qi}");
    }
}

fn set(ids: &[(&str, bool, bool)]) -> CandidateSet {
    let mut s = CandidateSet::new();
    for (id, k, sem) in ids {
        s.insert(
            *id,
            Provenance {
                keyword: *k,
                semantic: *sem,
            },
        );
    }
    s
}

#[test]
fn merge_examples() {
    let a = set(&[("a", true, false), ("b", true, false), ("c", true, false)]);
    let b = set(&[("d", false, true), ("e", false, true)]);
    assert_eq!(merge_candidates(&a, &b).len(), 5);
    let sem = set(&[("a", false, true), ("b", false, true), ("c", false, true)]);
    let m = merge_candidates(&a, &sem);
    assert_eq!(m.len(), 3);
    assert!(m.entries.values().all(|p| p.keyword && p.semantic));
}

fn arb_set() -> impl Strategy<Value = CandidateSet> {
    prop::collection::vec((0u8..12, any::<bool>(), any::<bool>()), 0..10).prop_map(|v| {
        let mut s = CandidateSet::new();
        for (id, k, sem) in v {
            s.insert(
                format!("D{id}"),
                Provenance {
                    keyword: k,
                    semantic: sem,
                },
            );
        }
        s
    })
}

proptest! {
    #[test]
    fn merge_is_a_semilattice(a in arb_set(), b in arb_set(), c in arb_set()) {
        prop_assert_eq!(merge_candidates(&a, &b), merge_candidates(&b, &a));
        prop_assert_eq!(
            merge_candidates(&merge_candidates(&a, &b), &c),
            merge_candidates(&a, &merge_candidates(&b, &c))
        );
        prop_assert_eq!(merge_candidates(&a, &a), a.clone());
        let m = merge_candidates(&a, &b);
        for id in a.identifiers().chain(b.identifiers()) {
            prop_assert!(m.contains(id));
        }
    }
}

fn seven_kb() -> KnowledgeBase {
    kb_from(&[(
        "c",
        "e",
        &[
            ("A1", "the open ball around a point"),
            ("A2", "a neighbourhood of a point in a topological space"),
            ("A3", "limit of a sequence"),
            ("A4", "continuous function between spaces"),
            ("A5", "compact subsets are closed"),
            ("A6", "derivative of a function"),
            ("A7", "metric on a set"),
        ],
    )])
}

#[test]
fn final_rerank_matches_sort_oracle() {
    let kb = seven_kb();
    let view = kb.view();
    let gw = Gateway::mock(ScriptedChat::new());
    let all: CandidateSet = set(&[
        ("A1", true, false),
        ("A2", true, false),
        ("A3", true, false),
        ("A4", false, true),
        ("A5", false, true),
        ("A6", false, true),
        ("A7", false, true),
    ]);
    let q = AugmentedQuery::new("neighborhood", "points close to a given point in a metric space");
    let ctx = final_rerank(&gw, std::slice::from_ref(&q), &all, &view, 3).unwrap();
    let e = HashEmbedder::default();
    let qv = e.vector(&q.concept.interpretation);
    let mut oracle: Vec<(String, f64)> = all
        .identifiers()
        .map(|id| {
            let ann = &view.description_for(id).unwrap().annotation;
            (id.to_string(), e.vector(ann).cosine(&qv).unwrap())
        })
        .collect();
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let want: Vec<&str> = oracle.iter().take(3).map(|(i, _)| i.as_str()).collect();
    assert_eq!(ctx.identifiers(), want);
    assert!(ctx.entries.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(!ctx.degraded);
    assert!(ctx.rendered_prompt.contains("[1] "));

    let one = final_rerank(&gw, std::slice::from_ref(&q), &set(&[("A3", true, false)]), &view, 3).unwrap();
    assert_eq!(one.entries.len(), 1);

    let none = final_rerank(&gw, std::slice::from_ref(&q), &CandidateSet::new(), &view, 3).unwrap();
    assert!(none.entries.is_empty() && none.rendered_prompt.is_empty());
    assert_eq!(none.warnings.len(), 1);
}

struct Scaled(CosineReranker, f64);

impl RerankBackend for Scaled {
    fn score(&self, q: &str, c: &[String]) -> Result<Vec<f64>, ProviderError> {
        Ok(self.0.score(q, c)?.into_iter().map(|s| s * self.1).collect())
    }
}

struct Broken;

impl RerankBackend for Broken {
    fn score(&self, _: &str, _: &[String]) -> Result<Vec<f64>, ProviderError> {
        Err(ProviderError::Protocol("down".into()))
    }
}

#[test]
fn positive_scaling_keeps_selection() {
    let kb = seven_kb();
    let view = kb.view();
    let all = set(&[
        ("A1", true, false),
        ("A2", true, false),
        ("A3", true, false),
        ("A4", true, false),
        ("A5", true, false),
        ("A6", true, false),
        ("A7", true, false),
    ]);
    let q = AugmentedQuery::new("n", "open sets around points");
    let base = final_rerank(&Gateway::mock(ScriptedChat::new()), std::slice::from_ref(&q), &all, &view, 3)
        .unwrap();
    for factor in [0.001, 2.5, 1000.0] {
        let gw = Gateway::mock(ScriptedChat::new()).with_reranker(Arc::new(Scaled(
            CosineReranker::new(HashEmbedder::default()),
            factor,
        )));
        let ctx = final_rerank(&gw, std::slice::from_ref(&q), &all, &view, 3).unwrap();
        assert_eq!(ctx.identifiers(), base.identifiers());
    }
}

#[test]
fn reranker_failure_degrades_to_cosine() {
    let kb = seven_kb();
    let view = kb.view();
    let all = set(&[("A1", true, false), ("A2", true, false), ("A7", true, false)]);
    let q = AugmentedQuery::new("n", "metric on a set");
    let gw = Gateway::mock(ScriptedChat::new()).with_reranker(Arc::new(Broken));
    let ctx = final_rerank(&gw, std::slice::from_ref(&q), &all, &view, 3).unwrap();
    assert!(ctx.degraded);
    assert_eq!(ctx.identifiers()[0], "A7");
}

fn end_to_end_chat() -> ScriptedChat {
    ScriptedChat::new()
        .rule(ids::CLASSIFY_PROBLEM, |_| Some("CLASS: explicit".into()))
        .rule(ids::EXTRACT_QUERY_CONCEPTS, |_| Some("CONCEPT: open ball".into()))
        .rule(ids::INTERPRET_CONCEPT, |_| Some("the open ball in a metric space".into()))
        .rule(ids::GENERATE_KEYWORDS, |_| Some("KEYWORDS: ball, IsCompact".into()))
}

#[test]
fn end_to_end_is_deterministic_and_keeps_keyword_hits() {
    let kb = kb_from(&[
        ("open ball", "points within distance r of a centre", &[("Metric.ball", "the open ball in a metric space")]),
        ("compact set", "every open cover has a finite subcover", &[("IsCompact", "compactness")]),
        ("limit", "eventual behaviour", &[("Filter.Tendsto", "convergence along filters")]),
    ]);
    let gw = Gateway::mock(end_to_end_chat());
    let idx = concept_index(&gw, &kb);
    let r1 = retrieve(&gw, "Show the unit ball is bounded", &kb, &idx, &RetrievalSettings::default()).unwrap();
    let r2 = retrieve(&gw, "Show the unit ball is bounded", &kb, &idx, &RetrievalSettings::default()).unwrap();
    assert_eq!(r1.context.rendered_prompt, r2.context.rendered_prompt);
    assert_eq!(r1.context.identifiers()[0], "Metric.ball");
    assert!(r1.candidates.contains("IsCompact"));
    assert_eq!(r1.concepts[0].query.keywords, vec!["ball", "IsCompact"]);
    assert!(r1.context.entries.len() <= 3);
}

#[test]
fn no_matching_definitions_gives_empty_context() {
    let kb = kb_from(&[("x", "y", &[("Foo", "bar")])]);
    let gw = Gateway::mock(end_to_end_chat());
    let unrelated = build_index(crate::index::testing::random_units(1, 3, 8), IndexSide::Concept).unwrap();
    let r = retrieve(&gw, "s", &kb, &unrelated, &RetrievalSettings::default()).unwrap();
    assert!(r.candidates.is_empty());
    assert!(r.context.entries.is_empty());
    assert!(r.context.rendered_prompt.is_empty());
}

#[test]
fn all_channels_failing_is_an_error() {
    let kb = kb_from(&[("x", "y", &[("Foo", "bar")])]);
    let gw = Gateway::mock(
        ScriptedChat::new()
            .rule(ids::CLASSIFY_PROBLEM, |_| Some("CLASS: explicit".into()))
            .rule(ids::EXTRACT_QUERY_CONCEPTS, |_| Some("CONCEPT: x".into()))
            .rule(ids::INTERPRET_CONCEPT, |_| Some("i".into())),
    );
    let idx = concept_index(&gw, &kb);
    let other = crate::index::testing::random_units(1, 3, 8);
    let bad_idx = build_index(other, IndexSide::Concept).unwrap();
    let err = retrieve(&gw, "s", &kb, &bad_idx, &RetrievalSettings::default()).unwrap_err();
    assert!(matches!(err, RetrievalError::AllChannelsFailed { .. }));
    // The keyword channel alone is enough to keep going.
    let ok = retrieve(&gw, "s", &kb, &idx, &RetrievalSettings::default()).unwrap();
    assert!(!ok.context.warnings.is_empty());
}

#[test]
fn settings_ordering_is_checked() {
    assert!(RetrievalSettings::default().check().is_ok());
    let bad = RetrievalSettings {
        final_top: 6,
        ..RetrievalSettings::default()
    };
    assert!(bad.check().is_err());
}

#[test]
fn bm25_baseline_renders_context() {
    let kb = seven_kb();
    let gw = Gateway::mock(ScriptedChat::new());
    let ctx = baseline_bm25(&gw, "the derivative of a function", &kb, 3).unwrap();
    assert_eq!(ctx.identifiers()[0], "A6");
    let none = baseline_bm25(&gw, "zzz", &kb, 3).unwrap();
    assert!(none.entries.is_empty());
}
