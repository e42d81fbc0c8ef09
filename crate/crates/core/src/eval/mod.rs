//! Evaluation harness: formalization attempts with compile and
//! back-translation checks, per-definition contribution scoring, and the
//! aggregate metrics with an optional no-retrieval control.

mod compiler;
mod metrics;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use compiler::{
    CommandCompiler, CommandCompilerConfig, CompileError, CompileResult, Compiler,
    ScriptedCompiler,
};
pub use metrics::{
    acs, cpr_at_k, far_at_k, hit_rate_at_k, relative_gain, ContributionScore,
    EvaluationRecord, FormalizationAttempt, JudgedBy, MetricError, RetrievedScore, ScoreBasis,
};

use crate::provider::{ids, vars, ChatRequest, Gateway, ProviderError};
use crate::retrieval::{GroundingContext, RetrievalError, Retriever};
use crate::text::{appears_in_code, strip_code_fence, verdict};

const REPROMPT_NOTE: &str = "Your previous reply could not be parsed. Reply with exactly one line: VERDICT: yes or VERDICT: no.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub statement: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("problems file {path}: {message}")]
    Problems { path: String, message: String },
    #[error("no problems to evaluate")]
    NoProblems,
}

/// Reads line-delimited `{problem_id, statement}` records.
pub fn load_problems(path: &Path) -> Result<Vec<Problem>, EvalError> {
    let err = |message: String| EvalError::Problems {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut out: Vec<Problem> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem =
            serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        if p.statement.trim().is_empty() {
            return Err(err(format!("line {}: statement is empty", i + 1)));
        }
        if out.iter().any(|q| q.problem_id == p.problem_id) {
            return Err(err(format!("line {}: duplicate problem_id {:?}", i + 1, p.problem_id)));
        }
        out.push(p);
    }
    Ok(out)
}

/// Yes/no judgements asked through the chat gateway.
#[derive(Debug, Clone, Copy)]
pub struct Judge<'a> {
    gateway: &'a Gateway,
}

impl<'a> Judge<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Judge { gateway }
    }

    fn ask(&self, template: &str, pairs: &[(&str, &str)]) -> Result<bool, ProviderError> {
        let mut last = String::new();
        for note in ["", REPROMPT_NOTE] {
            let mut v = vars(pairs.iter().copied());
            v.insert("retry_note".into(), note.into());
            last = self.gateway.chat(&ChatRequest::new(template, v))?;
            if let Some(b) = verdict(&last) {
                return Ok(b);
            }
        }
        Err(ProviderError::Protocol(format!("no verdict in {last:?}")))
    }

    pub fn consistent(&self, statement: &str, back_translation: &str) -> Result<bool, ProviderError> {
        self.ask(
            ids::JUDGE_CONSISTENCY,
            &[("statement", statement), ("back_translation", back_translation)],
        )
    }

    pub fn strongly_relevant(
        &self,
        statement: &str,
        identifier: &str,
        annotation: &str,
    ) -> Result<bool, ProviderError> {
        self.ask(
            ids::JUDGE_STRONG_RELEVANCE,
            &[("statement", statement), ("identifier", identifier), ("annotation", annotation)],
        )
    }

    pub fn weakly_relevant(
        &self,
        statement: &str,
        identifier: &str,
        annotation: &str,
    ) -> Result<bool, ProviderError> {
        self.ask(
            ids::JUDGE_WEAK_RELEVANCE,
            &[("statement", statement), ("identifier", identifier), ("annotation", annotation)],
        )
    }
}

/// Statement formalization and back-translation through the chat gateway.
#[derive(Debug, Clone, Copy)]
pub struct Formalizer<'a> {
    gateway: &'a Gateway,
    temperature: f64,
}

impl<'a> Formalizer<'a> {
    pub fn new(gateway: &'a Gateway, temperature: f64) -> Self {
        Formalizer {
            gateway,
            temperature,
        }
    }

    pub fn formalize(&self, context: &str, statement: &str, attempt: usize) -> Result<String, ProviderError> {
        let req = ChatRequest::new(
            ids::FORMALIZE,
            vars([
                ("context", context),
                ("statement", statement),
                ("attempt", &attempt.to_string()),
            ]),
        )
        .with_temperature(self.temperature);
        Ok(strip_code_fence(&self.gateway.chat(&req)?))
    }

    pub fn back_translate(&self, formal_code: &str) -> Result<String, ProviderError> {
        let req = ChatRequest::new(ids::BACK_TRANSLATE_FORMAL, vars([("formal_code", formal_code)]));
        Ok(self.gateway.chat(&req)?.trim().to_string())
    }
}

/// Scores one retrieved definition. Appearing in an attempt's code decides
/// 3 or 0 by that attempt's outcome alone; otherwise the judge decides 2 or
/// 1 without looking at compile results.
pub fn score_definition(
    identifier: &str,
    annotation: &str,
    statement: &str,
    attempts: &[FormalizationAttempt],
    judge: &Judge<'_>,
) -> Result<ContributionScore, ProviderError> {
    let appearing: Vec<&FormalizationAttempt> = attempts
        .iter()
        .filter(|a| appears_in_code(identifier, &a.formal_code))
        .collect();
    if !appearing.is_empty() {
        return Ok(if appearing.iter().any(|a| a.succeeded()) {
            ContributionScore::EXACT
        } else {
            ContributionScore::ERRONEOUS
        });
    }
    if judge.strongly_relevant(statement, identifier, annotation)? {
        return Ok(ContributionScore::STRONG);
    }
    if judge.weakly_relevant(statement, identifier, annotation)? {
        return Ok(ContributionScore::WEAK);
    }
    Ok(ContributionScore::AMBIGUOUS)
}

/// Where grounding contexts come from.
pub trait ContextSource: Sync {
    fn context(&self, statement: &str) -> Result<GroundingContext, RetrievalError>;
}

impl ContextSource for Retriever<'_> {
    fn context(&self, statement: &str) -> Result<GroundingContext, RetrievalError> {
        Ok(self.retrieve(statement)?.context)
    }
}

/// The no-retrieval control.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoContext;

impl ContextSource for NoContext {
    fn context(&self, _statement: &str) -> Result<GroundingContext, RetrievalError> {
        Ok(GroundingContext::default())
    }
}

impl<F> ContextSource for F
where
    F: Fn(&str) -> Result<GroundingContext, RetrievalError> + Sync,
{
    fn context(&self, statement: &str) -> Result<GroundingContext, RetrievalError> {
        self(statement)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Formalization attempts per problem.
    pub attempts: usize,
    /// Cut-off for HitRate.
    pub hit_k: usize,
    pub temperature: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            attempts: 10,
            hit_k: 3,
            temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Undefined when no retrieved definition was judged.
    pub acs: Option<f64>,
    pub hit_rate_at_k: Option<f64>,
    pub cpr_at_k: Option<f64>,
    pub far_at_k: Option<f64>,
    /// Problems that entered the metrics.
    pub n: usize,
    pub k: usize,
    pub hit_k: usize,
    pub failed_problems: usize,
    pub unjudged_definitions: usize,
    pub ambiguous_definitions: usize,
    pub degraded_problems: usize,
}

impl MetricsReport {
    pub fn from_records(records: &[EvaluationRecord], k: usize, hit_k: usize) -> Self {
        let ok = |r: &EvaluationRecord| r.failure.is_none();
        let scores = || {
            records
                .iter()
                .filter(|r| ok(r))
                .flat_map(|r| r.retrieved.iter())
        };
        MetricsReport {
            acs: acs(records).ok(),
            hit_rate_at_k: hit_rate_at_k(records, hit_k).ok(),
            cpr_at_k: cpr_at_k(records, k).ok(),
            far_at_k: far_at_k(records, k).ok(),
            n: records.iter().filter(|r| ok(r)).count(),
            k,
            hit_k,
            failed_problems: records.iter().filter(|r| !ok(r)).count(),
            unjudged_definitions: scores().filter(|s| s.score.is_none()).count(),
            ambiguous_definitions: scores()
                .filter(|s| s.score.is_some_and(|x| x.ambiguous))
                .count(),
            degraded_problems: records.iter().filter(|r| ok(r) && r.degraded).count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeGains {
    pub cpr: Option<f64>,
    pub far: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub records: Vec<EvaluationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_gain: Option<RelativeGains>,
}

/// Compares augmented and control reports metric by metric.
pub fn gains(base: &MetricsReport, aug: &MetricsReport) -> RelativeGains {
    let rg = |b: Option<f64>, a: Option<f64>| b.zip(a).and_then(|(b, a)| relative_gain(b, a));
    RelativeGains {
        cpr: rg(base.cpr_at_k, aug.cpr_at_k),
        far: rg(base.far_at_k, aug.far_at_k),
    }
}

/// Adapters one evaluation run needs.
pub struct EvalAdapters<'a> {
    pub gateway: &'a Gateway,
    pub compiler: &'a dyn Compiler,
}

fn evaluate_problem(
    problem: &Problem,
    source: &dyn ContextSource,
    adapters: &EvalAdapters<'_>,
    settings: &EvalSettings,
) -> EvaluationRecord {
    let mut record = EvaluationRecord {
        problem_id: problem.problem_id.clone(),
        statement: problem.statement.clone(),
        ..EvaluationRecord::default()
    };
    let fail = |mut r: EvaluationRecord, msg: String| {
        tracing::warn!(problem = %r.problem_id, "problem excluded: {msg}");
        r.failure = Some(msg);
        r
    };
    let ctx = match source.context(&problem.statement) {
        Ok(c) => c,
        Err(e) => return fail(record, format!("retrieval: {e}")),
    };
    record.degraded = ctx.degraded;
    record.warnings = ctx.warnings.clone();
    let formalizer = Formalizer::new(adapters.gateway, settings.temperature);
    let judge = Judge::new(adapters.gateway);
    for i in 0..settings.attempts {
        let code = match formalizer.formalize(&ctx.rendered_prompt, &problem.statement, i) {
            Ok(c) => c,
            Err(e) => return fail(record, format!("formalization attempt {i}: {e}")),
        };
        let compiled = match adapters.compiler.compile(&code) {
            Ok(c) => c,
            Err(e) => return fail(record, format!("compiler: {e}")),
        };
        let mut attempt = FormalizationAttempt {
            formal_code: code,
            compiled: compiled.compiled,
            diagnostics: compiled.diagnostics,
            back_translation: None,
            consistent: None,
        };
        if attempt.compiled {
            match formalizer.back_translate(&attempt.formal_code) {
                Ok(bt) => {
                    match judge.consistent(&problem.statement, &bt) {
                        Ok(v) => attempt.consistent = Some(v),
                        Err(e) => record
                            .warnings
                            .push(format!("attempt {i}: consistency judge failed: {e}")),
                    }
                    attempt.back_translation = Some(bt);
                }
                Err(e) => record
                    .warnings
                    .push(format!("attempt {i}: back-translation failed: {e}")),
            }
        }
        record.attempts.push(attempt);
    }
    for e in &ctx.entries {
        let id = &e.definition.identifier;
        let scored = score_definition(
            id,
            &e.description.annotation,
            &problem.statement,
            &record.attempts,
            &judge,
        );
        record.retrieved.push(match scored {
            Ok(s) => RetrievedScore {
                identifier: id.clone(),
                score: Some(s),
                error: None,
            },
            Err(err) => RetrievedScore {
                identifier: id.clone(),
                score: None,
                error: Some(err.to_string()),
            },
        });
    }
    record
}

/// Evaluates every problem with contexts from `source`; records come back
/// sorted by problem id.
pub fn evaluate(
    problems: &[Problem],
    source: &dyn ContextSource,
    adapters: &EvalAdapters<'_>,
    settings: &EvalSettings,
) -> Vec<EvaluationRecord> {
    let mut records: Vec<EvaluationRecord> = problems
        .par_iter()
        .map(|p| evaluate_problem(p, source, adapters, settings))
        .collect();
    records.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    records
}

/// Full run: augmented evaluation, plus the no-retrieval control and
/// relative gains when `control` is set.
pub fn run_eval(
    problems: &[Problem],
    source: &dyn ContextSource,
    adapters: &EvalAdapters<'_>,
    settings: &EvalSettings,
    control: bool,
) -> Result<EvalRun, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::NoProblems);
    }
    let records = evaluate(problems, source, adapters, settings);
    let report = MetricsReport::from_records(&records, settings.attempts, settings.hit_k);
    let (control, relative_gain) = if control {
        let base_records = evaluate(problems, &NoContext, adapters, settings);
        let base = MetricsReport::from_records(&base_records, settings.attempts, settings.hit_k);
        let rg = gains(&base, &report);
        (Some(base), Some(rg))
    } else {
        (None, None)
    };
    Ok(EvalRun {
        report,
        records,
        control,
        relative_gain,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x * 100.0))
}

fn signed_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:+.1}%", x * 100.0))
}

/// Human-readable summary. With a control run the rates get Base, +CRAMF
/// and RG columns.
pub fn render_table(run: &EvalRun) -> String {
    let r = &run.report;
    let mut out = String::new();
    let cpr = format!("CPR@{}", r.k);
    let far = format!("FAR@{}", r.k);
    let hit = format!("HitRate@{}", r.hit_k);
    match (&run.control, &run.relative_gain) {
        (Some(base), Some(rg)) => {
            out.push_str(&format!("{:<12} {:>8} {:>8} {:>8}\n", "metric", "Base", "+CRAMF", "RG"));
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8}\n",
                cpr,
                pct(base.cpr_at_k),
                pct(r.cpr_at_k),
                signed_pct(rg.cpr)
            ));
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8}\n",
                far,
                pct(base.far_at_k),
                pct(r.far_at_k),
                signed_pct(rg.far)
            ));
        }
        _ => {
            out.push_str(&format!("{:<12} {:>8}\n", "metric", "value"));
            out.push_str(&format!("{:<12} {:>8}\n", cpr, pct(r.cpr_at_k)));
            out.push_str(&format!("{:<12} {:>8}\n", far, pct(r.far_at_k)));
        }
    }
    out.push_str(&format!(
        "{:<12} {:>8}\n",
        "ACS",
        r.acs.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"))
    ));
    out.push_str(&format!("{:<12} {:>8}\n", hit, pct(r.hit_rate_at_k)));
    out.push_str(&format!(
        "problems: {}  failed: {}  unjudged: {}  ambiguous: {}  degraded: {}\n",
        r.n, r.failed_problems, r.unjudged_definitions, r.ambiguous_definitions, r.degraded_problems
    ));
    out
}

#[cfg(test)]
mod tests;
