//! Contribution scores and the aggregate metrics over evaluation records.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBasis {
    ExactMatch,
    StrongRelevance,
    WeakRelevance,
    ErroneousReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgedBy {
    RegexRule,
    LlmJudge,
}

/// A retrieved definition's contribution to one problem, 0 to 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionScore {
    pub value: u8,
    pub basis: ScoreBasis,
    pub judged_by: JudgedBy,
    /// The judge denied both strong and weak relevance; the value is a
    /// default, not a verdict.
    #[serde(default)]
    pub ambiguous: bool,
}

impl ContributionScore {
    pub const EXACT: ContributionScore = ContributionScore {
        value: 3,
        basis: ScoreBasis::ExactMatch,
        judged_by: JudgedBy::RegexRule,
        ambiguous: false,
    };
    pub const STRONG: ContributionScore = ContributionScore {
        value: 2,
        basis: ScoreBasis::StrongRelevance,
        judged_by: JudgedBy::LlmJudge,
        ambiguous: false,
    };
    pub const WEAK: ContributionScore = ContributionScore {
        value: 1,
        basis: ScoreBasis::WeakRelevance,
        judged_by: JudgedBy::LlmJudge,
        ambiguous: false,
    };
    pub const AMBIGUOUS: ContributionScore = ContributionScore {
        value: 1,
        basis: ScoreBasis::WeakRelevance,
        judged_by: JudgedBy::LlmJudge,
        ambiguous: true,
    };
    pub const ERRONEOUS: ContributionScore = ContributionScore {
        value: 0,
        basis: ScoreBasis::ErroneousReference,
        judged_by: JudgedBy::RegexRule,
        ambiguous: false,
    };

    /// Score for a bare value, as used by fixtures and replays.
    pub fn from_value(value: u8) -> Option<ContributionScore> {
        match value {
            3 => Some(Self::EXACT),
            2 => Some(Self::STRONG),
            1 => Some(Self::WEAK),
            0 => Some(Self::ERRONEOUS),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedScore {
    pub identifier: String,
    /// Absent when the judge could not be reached.
    pub score: Option<ContributionScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormalizationAttempt {
    pub formal_code: String,
    pub compiled: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostics: String,
    pub back_translation: Option<String>,
    /// Only present for compiled attempts.
    pub consistent: Option<bool>,
}

impl FormalizationAttempt {
    pub fn succeeded(&self) -> bool {
        self.compiled && self.consistent == Some(true)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub problem_id: String,
    pub statement: String,
    /// In final rerank order.
    pub retrieved: Vec<RetrievedScore>,
    pub attempts: Vec<FormalizationAttempt>,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Set when the problem could not be evaluated; such records are left
    /// out of every metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvaluationRecord {
    /// Record with the given retrieved scores (in rank order) and no
    /// attempts.
    pub fn with_scores(problem_id: impl Into<String>, scores: &[u8]) -> Self {
        EvaluationRecord {
            problem_id: problem_id.into(),
            retrieved: scores
                .iter()
                .enumerate()
                .map(|(i, v)| RetrievedScore {
                    identifier: format!("d{i}"),
                    score: ContributionScore::from_value(*v),
                    error: None,
                })
                .collect(),
            ..EvaluationRecord::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{0} is undefined: nothing to average over")]
    Undefined(&'static str),
}

fn usable(records: &[EvaluationRecord]) -> impl Iterator<Item = &EvaluationRecord> {
    records.iter().filter(|r| r.failure.is_none())
}

/// Sum of judged scores over the count of judged definitions.
pub fn acs(records: &[EvaluationRecord]) -> Result<f64, MetricError> {
    let mut sum = 0u64;
    let mut count = 0u64;
    for r in usable(records) {
        for s in r.retrieved.iter().filter_map(|x| x.score) {
            sum += u64::from(s.value);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::Undefined("ACS"));
    }
    Ok(sum as f64 / count as f64)
}

/// Fraction of problems whose first `k` retrieved definitions include one
/// scoring 2 or more.
pub fn hit_rate_at_k(records: &[EvaluationRecord], k: usize) -> Result<f64, MetricError> {
    let mut n = 0usize;
    let mut hits = 0usize;
    for r in usable(records) {
        n += 1;
        let hit = r
            .retrieved
            .iter()
            .take(k)
            .filter_map(|x| x.score)
            .any(|s| s.value >= 2);
        hits += usize::from(hit);
    }
    if n == 0 {
        return Err(MetricError::Undefined("HitRate@k"));
    }
    Ok(hits as f64 / n as f64)
}

fn any_attempt(
    records: &[EvaluationRecord],
    k: usize,
    name: &'static str,
    pred: impl Fn(&FormalizationAttempt) -> bool,
) -> Result<f64, MetricError> {
    let mut n = 0usize;
    let mut pass = 0usize;
    for r in usable(records) {
        n += 1;
        pass += usize::from(r.attempts.iter().take(k).any(&pred));
    }
    if n == 0 {
        return Err(MetricError::Undefined(name));
    }
    Ok(pass as f64 / n as f64)
}

/// Fraction of problems with a compiling attempt among the first `k`.
pub fn cpr_at_k(records: &[EvaluationRecord], k: usize) -> Result<f64, MetricError> {
    any_attempt(records, k, "CPR@k", |a| a.compiled)
}

/// Fraction of problems with a compiling and consistent attempt among the
/// first `k`.
pub fn far_at_k(records: &[EvaluationRecord], k: usize) -> Result<f64, MetricError> {
    any_attempt(records, k, "FAR@k", FormalizationAttempt::succeeded)
}

/// `(aug - base) / base`; undefined for a zero base.
pub fn relative_gain(base: f64, aug: f64) -> Option<f64> {
    (base != 0.0).then(|| (aug - base) / base)
}
