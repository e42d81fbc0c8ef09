use super::*;
use crate::kb::{Definition, DefinitionKind, Description, DescriptionOrigin};
use crate::provider::mock::ScriptedChat;
use crate::retrieval::GroundedDefinition;

fn attempt(code: &str, compiled: bool, consistent: Option<bool>) -> FormalizationAttempt {
    FormalizationAttempt {
        formal_code: code.into(),
        compiled,
        diagnostics: String::new(),
        back_translation: None,
        consistent,
    }
}

fn judge_chat(strong: bool, weak: bool) -> ScriptedChat {
    let yn = |b: bool| if b { "VERDICT: yes" } else { "VERDICT: no" };
    let (s, w) = (yn(strong).to_string(), yn(weak).to_string());
    ScriptedChat::new()
        .rule(ids::JUDGE_STRONG_RELEVANCE, move |_| Some(s.clone()))
        .rule(ids::JUDGE_WEAK_RELEVANCE, move |_| Some(w.clone()))
}

#[test]
fn rubric_cases() {
    // No judge rules at all: the regex half must never ask.
    let silent = Gateway::mock(ScriptedChat::new());
    let j = Judge::new(&silent);
    let good = [attempt("theorem t : IsCompact s := by sorry", true, Some(true))];
    assert_eq!(score_definition("IsCompact", "", "s", &good, &j).unwrap(), ContributionScore::EXACT);
    let uncompiled = [attempt("theorem t : IsCompact s := by sorry", false, None)];
    assert_eq!(
        score_definition("IsCompact", "", "s", &uncompiled, &j).unwrap(),
        ContributionScore::ERRONEOUS
    );
    let inconsistent = [attempt("IsCompact s", true, Some(false))];
    assert_eq!(
        score_definition("IsCompact", "", "s", &inconsistent, &j).unwrap().value,
        0
    );
    let by_segment = [attempt("Tendsto f atTop (nhds 0)", true, Some(true))];
    assert_eq!(score_definition("Filter.Tendsto", "", "s", &by_segment, &j).unwrap().value, 3);

    let absent = [attempt("theorem t : True := trivial", true, Some(true))];
    let strong = Gateway::mock(judge_chat(true, false));
    let s = score_definition("Metric.ball", "ball", "s", &absent, &Judge::new(&strong)).unwrap();
    assert_eq!(s, ContributionScore::STRONG);
    assert_eq!(s.judged_by, JudgedBy::LlmJudge);
    let weak = Gateway::mock(judge_chat(false, true));
    assert_eq!(
        score_definition("Metric.ball", "ball", "s", &absent, &Judge::new(&weak)).unwrap(),
        ContributionScore::WEAK
    );
    let neither = Gateway::mock(judge_chat(false, false));
    let s = score_definition("Metric.ball", "ball", "s", &absent, &Judge::new(&neither)).unwrap();
    assert_eq!((s.value, s.ambiguous), (1, true));
    assert!(score_definition("Metric.ball", "ball", "s", &absent, &j).is_err());
}

#[test]
fn judge_reprompts_once() {
    let chat = ScriptedChat::new().rule(ids::JUDGE_CONSISTENCY, |v| {
        Some(if v["retry_note"].is_empty() { "perhaps".into() } else { "VERDICT: yes".into() })
    });
    let gw = Gateway::mock(chat);
    assert!(Judge::new(&gw).consistent("a", "b").unwrap());
}

fn ctx_with(ids: &[&str]) -> GroundingContext {
    GroundingContext {
        entries: ids
            .iter()
            .map(|id| {
                let definition = Definition {
                    identifier: id.to_string(),
                    formal_expression: "x".into(),
                    module_path: "M".into(),
                    kind: DefinitionKind::Def,
                };
                GroundedDefinition {
                    description: Description::new(&definition, format!("about {id}"), DescriptionOrigin::Library),
                    definition,
                    score: 1.0,
                }
            })
            .collect(),
        rendered_prompt: format!("context {}", ids.join(",")),
        ..GroundingContext::default()
    }
}

fn problems(n: usize) -> Vec<Problem> {
    (0..n)
        .map(|i| Problem {
            problem_id: format!("p{i}"),
            statement: format!("statement {i}"),
        })
        .collect()
}

fn everything_chat() -> ScriptedChat {
    judge_chat(false, true)
        .rule(ids::FORMALIZE, |v| Some(format!("```lean\ntheorem t : True := by sorry -- {}\n```", v["context"].len())))
        .rule(ids::BACK_TRANSLATE_FORMAL, |v| Some(v["formal_code"].clone()))
        .rule(ids::JUDGE_CONSISTENCY, |_| Some("VERDICT: yes".into()))
}

#[test]
fn failing_compiler_zeroes_rates() {
    let gw = Gateway::mock(everything_chat());
    let compiler = ScriptedCompiler::always(false);
    let adapters = EvalAdapters {
        gateway: &gw,
        compiler: &compiler,
    };
    let settings = EvalSettings {
        attempts: 1,
        ..EvalSettings::default()
    };
    let source = |_: &str| Ok(ctx_with(&["A"]));
    let run = run_eval(&problems(3), &source, &adapters, &settings, false).unwrap();
    assert_eq!(run.report.cpr_at_k, Some(0.0));
    assert_eq!(run.report.far_at_k, Some(0.0));
    assert_eq!(run.report.acs, Some(1.0));
    assert!(run.records.iter().all(|r| r.attempts.len() == 1 && r.attempts[0].consistent.is_none()));
    assert!(render_table(&run).contains("CPR@1"));
}

#[test]
fn control_matches_when_contexts_are_empty() {
    let gw = Gateway::mock(everything_chat());
    let compiler = ScriptedCompiler::always(true);
    let adapters = EvalAdapters {
        gateway: &gw,
        compiler: &compiler,
    };
    let settings = EvalSettings {
        attempts: 2,
        ..EvalSettings::default()
    };
    let run = run_eval(&problems(4), &NoContext, &adapters, &settings, true).unwrap();
    let rg = run.relative_gain.unwrap();
    assert_eq!(rg.cpr, Some(0.0));
    assert_eq!(rg.far, Some(0.0));
    assert_eq!(run.control.as_ref().unwrap().cpr_at_k, run.report.cpr_at_k);
    assert!(run.report.acs.is_none());
    let table = render_table(&run);
    assert!(table.contains("+CRAMF") && table.contains("+0.0%"), "{table}");
}

#[test]
fn per_problem_failures_are_excluded_and_counted() {
    let gw = Gateway::mock(everything_chat());
    let compiler = ScriptedCompiler::always(true);
    let adapters = EvalAdapters {
        gateway: &gw,
        compiler: &compiler,
    };
    let source = |s: &str| {
        if s.ends_with('1') {
            Err(RetrievalError::Input("boom".into()))
        } else {
            Ok(ctx_with(&[]))
        }
    };
    let run = run_eval(&problems(3), &source, &adapters, &EvalSettings { attempts: 1, ..Default::default() }, false)
        .unwrap();
    assert_eq!(run.report.n, 2);
    assert_eq!(run.report.failed_problems, 1);
    assert_eq!(run.report.cpr_at_k, Some(1.0));
    let ids: Vec<&str> = run.records.iter().map(|r| r.problem_id.as_str()).collect();
    assert_eq!(ids, vec!["p0", "p1", "p2"]);
}

#[test]
fn unjudged_definitions_are_reported() {
    let gw = Gateway::mock(
        ScriptedChat::new()
            .rule(ids::FORMALIZE, |_| Some("theorem t : True := trivial".into()))
            .rule(ids::BACK_TRANSLATE_FORMAL, |_| Some("true".into()))
            .rule(ids::JUDGE_CONSISTENCY, |_| Some("VERDICT: yes".into())),
    );
    let compiler = ScriptedCompiler::always(true);
    let adapters = EvalAdapters {
        gateway: &gw,
        compiler: &compiler,
    };
    let source = |_: &str| Ok(ctx_with(&["Foo"]));
    let run = run_eval(&problems(1), &source, &adapters, &EvalSettings { attempts: 1, ..Default::default() }, false)
        .unwrap();
    assert_eq!(run.report.unjudged_definitions, 1);
    assert_eq!(run.report.acs, None);
    assert_eq!(run.report.far_at_k, Some(1.0));
}

#[test]
fn problems_file_rules() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    std::fs::write(&p, "{\"problem_id\":\"a\",\"statement\":\"x\"}\n\n{\"problem_id\":\"b\",\"statement\":\"y\"}\n").unwrap();
    assert_eq!(load_problems(&p).unwrap().len(), 2);
    std::fs::write(&p, "{\"problem_id\":\"a\",\"statement\":\"x\"}\n{\"problem_id\":\"a\",\"statement\":\"y\"}\n").unwrap();
    assert!(load_problems(&p).is_err());
    assert!(matches!(
        run_eval(&[], &NoContext, &EvalAdapters { gateway: &Gateway::mock(ScriptedChat::new()), compiler: &ScriptedCompiler::always(true) }, &EvalSettings::default(), false),
        Err(EvalError::NoProblems)
    ));
}
