//! Domain types for preference chains: queries, answers, verdicts, and the
//! chain well-formedness rules shared by every other module.
//!
//! All types here are immutable value objects once constructed and are safe
//! to share across worker threads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Default cap on accepted refinements per chain.
pub const DEFAULT_MAX_REFINEMENTS: usize = 10;

/// One input record: a query plus an optional starting answer.
///
/// When `initial_answer` is absent the loop engine generates the first
/// answer with a zero-shot call before refining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Opaque id, unique within a run.
    pub id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_answer: Option<String>,
    /// Free key/value tags (source dataset, noise category, gold label, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// How an answer entered the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerOrigin {
    /// Taken verbatim from the input record.
    Seed,
    /// Produced by a feedback + refine round.
    Refined,
    /// Generated from the bare query.
    ZeroShot,
}

/// One answer at position `index` in a chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub index: usize,
    pub text: String,
    pub origin: AnswerOrigin,
    /// The feedback that produced this answer, when it was refined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_used: Option<String>,
    /// Whitespace-token count of `text`; always [`canonical_token_count`].
    pub token_count: usize,
}

impl Answer {
    /// Builds an answer with its canonical token count.
    pub fn new(index: usize, text: impl Into<String>, origin: AnswerOrigin) -> Self {
        let text = text.into();
        let token_count = canonical_token_count(&text);
        Answer {
            index,
            text,
            origin,
            feedback_used: None,
            token_count,
        }
    }

    pub fn with_feedback(mut self, feedback: impl Into<String>) -> Self {
        self.feedback_used = Some(feedback.into());
        self
    }
}

/// Which positional slot a single judge call preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    A,
    B,
    Tie,
}

/// One judge decision over a pair of positioned answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub preferred: Preference,
    /// Per-criterion scores as `(score_A, score_B)` on a 0-10 scale.
    /// Empty when the judge output carried no parseable scores.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub criterion_scores: BTreeMap<String, (u32, u32)>,
    pub rationale: String,
    /// Exact model output, retained verbatim for audit.
    pub raw_completion: String,
    /// Totals after a length-penalty adjustment, when one was applied.
    /// `preferred` is recomputed from these when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusted_totals: Option<(f64, f64)>,
}

impl Verdict {
    /// Raw score sums `(total_A, total_B)`; `None` without scores.
    pub fn score_totals(&self) -> Option<(u32, u32)> {
        if self.criterion_scores.is_empty() {
            return None;
        }
        let mut a = 0;
        let mut b = 0;
        for (sa, sb) in self.criterion_scores.values() {
            a += sa;
            b += sb;
        }
        Some((a, b))
    }

    /// Totals that determine the preference: adjusted when a length penalty
    /// was applied, raw sums otherwise.
    pub fn effective_totals(&self) -> Option<(f64, f64)> {
        if let Some(t) = self.adjusted_totals {
            return Some(t);
        }
        self.score_totals().map(|(a, b)| (a as f64, b as f64))
    }
}

/// Merged result of the two position-swapped judge calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasedOutcome {
    /// Both arrangements preferred the candidate.
    CandidateWins,
    /// Both arrangements preferred the incumbent.
    IncumbentWins,
    /// The arrangements disagreed, or at least one was a tie.
    Disagreement,
}

/// The pair of swapped judge calls for one incumbent/candidate comparison.
///
/// `first_call` saw the incumbent as Answer A (candidate in position B);
/// `second_call` saw the positions swapped (candidate in position A).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedVerdict {
    pub first_call: Verdict,
    pub second_call: Verdict,
    pub outcome: DebiasedOutcome,
}

impl DebiasedVerdict {
    /// Recomputes the outcome the two stored calls imply, un-swapping
    /// positions: the candidate sits in B on the first call, A on the second.
    pub fn implied_outcome(&self) -> DebiasedOutcome {
        let first_candidate = self.first_call.preferred == Preference::B;
        let first_incumbent = self.first_call.preferred == Preference::A;
        let second_candidate = self.second_call.preferred == Preference::A;
        let second_incumbent = self.second_call.preferred == Preference::B;
        if first_candidate && second_candidate {
            DebiasedOutcome::CandidateWins
        } else if first_incumbent && second_incumbent {
            DebiasedOutcome::IncumbentWins
        } else {
            DebiasedOutcome::Disagreement
        }
    }
}

/// Why a chain stopped growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The judge did not prefer the newest refinement.
    JudgeStop,
    /// The accepted-refinement cap was reached.
    MaxIterations,
    /// A backend error cut the chain short.
    BackendFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::JudgeStop => "judge_stop",
            Termination::MaxIterations => "max_iterations",
            Termination::BackendFailure => "backend_failure",
        }
    }
}

/// A query with its ordered accepted answers and the judgment trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceChain {
    pub record_id: String,
    pub query: String,
    /// Accepted answers only, seed first; `answers[t].index == t`.
    pub answers: Vec<Answer>,
    /// The terminal candidate that failed judgment, kept for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_candidate: Option<Answer>,
    /// One debiased verdict per accepted transition.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_verdicts: Vec<DebiasedVerdict>,
    pub termination: Termination,
}

impl PreferenceChain {
    /// The final accepted answer; the one SFT export pairs with the query.
    pub fn final_answer(&self) -> Option<&Answer> {
        self.answers.last()
    }
}

/// Deterministic whitespace token count: the number of maximal
/// non-whitespace runs in `text`.
pub fn canonical_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Checks every chain invariant and returns one entry per violation, each
/// naming the offending field and the rule. Empty means the chain is
/// well-formed under the given refinement cap.
pub fn validate_chain(chain: &PreferenceChain, max_refinements: usize) -> Vec<String> {
    let mut violations = Vec::new();

    if chain.record_id.trim().is_empty() {
        violations.push("record_id is empty".to_string());
    }
    if chain.query.trim().is_empty() {
        violations.push("query is empty after trimming".to_string());
    }

    if chain.answers.is_empty() {
        violations.push("answers is empty".to_string());
    }
    let cap = 1 + max_refinements;
    if chain.answers.len() > cap {
        violations.push(format!(
            "answers length {} exceeds {}",
            chain.answers.len(),
            cap
        ));
    }
    for (t, answer) in chain.answers.iter().enumerate() {
        if answer.index != t {
            violations.push(format!(
                "answers[{t}].index is {} instead of {t}",
                answer.index
            ));
        }
        check_answer(answer, &format!("answers[{t}]"), &mut violations);
    }

    if let Some(rejected) = &chain.rejected_candidate {
        check_answer(rejected, "rejected_candidate", &mut violations);
    }

    match chain.termination {
        Termination::JudgeStop => {
            if chain.rejected_candidate.is_none() {
                violations
                    .push("rejected_candidate absent despite judge_stop termination".to_string());
            }
        }
        Termination::MaxIterations => {
            if chain.rejected_candidate.is_some() {
                violations.push(
                    "rejected_candidate present despite max_iterations termination".to_string(),
                );
            }
        }
        Termination::BackendFailure => {}
    }

    let expected_verdicts = chain.answers.len().saturating_sub(1);
    if chain.step_verdicts.len() != expected_verdicts {
        violations.push(format!(
            "step_verdicts length {} \u{2260} {}",
            chain.step_verdicts.len(),
            expected_verdicts
        ));
    }
    for (t, verdict) in chain.step_verdicts.iter().enumerate() {
        if verdict.outcome != DebiasedOutcome::CandidateWins {
            violations.push(format!("step_verdicts[{t}].outcome is not candidate_wins"));
        }
        if verdict.implied_outcome() != verdict.outcome {
            violations.push(format!(
                "step_verdicts[{t}].outcome does not match its two calls"
            ));
        }
        check_verdict(
            &verdict.first_call,
            &format!("step_verdicts[{t}].first_call"),
            &mut violations,
        );
        check_verdict(
            &verdict.second_call,
            &format!("step_verdicts[{t}].second_call"),
            &mut violations,
        );
    }

    violations
}

fn check_answer(answer: &Answer, field: &str, violations: &mut Vec<String>) {
    let index_zero = answer.index == 0;
    let origin_initial = matches!(answer.origin, AnswerOrigin::Seed | AnswerOrigin::ZeroShot);
    if index_zero != origin_initial {
        violations.push(format!(
            "{field}: index {} inconsistent with origin {:?}",
            answer.index, answer.origin
        ));
    }
    let expected = canonical_token_count(&answer.text);
    if answer.token_count != expected {
        violations.push(format!(
            "{field}.token_count is {} instead of {expected}",
            answer.token_count
        ));
    }
}

fn check_verdict(verdict: &Verdict, field: &str, violations: &mut Vec<String>) {
    if let Some((a, b)) = verdict.effective_totals() {
        let consistent = match verdict.preferred {
            Preference::A => a >= b,
            Preference::B => b >= a,
            Preference::Tie => true,
        };
        if !consistent {
            violations.push(format!(
                "{field}: preferred side's score total is lower than the other side's"
            ));
        }
    }
}
