//! Pairwise judging: parsing free-form judge output into [`Verdict`]s and
//! running the position-debiased comparison that gates every refinement.
//!
//! A comparison issues two calls with the answers' positions swapped; the
//! candidate only wins when both arrangements prefer it, which cancels the
//! well-known lean toward whichever answer is shown first.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{CallRequest, CallTag, Gateway, GatewayError};
use crate::chain::{canonical_token_count, DebiasedOutcome, DebiasedVerdict, Preference, Verdict};
use crate::prompt::{render_judge, Criterion, PromptError, PromptTemplate};

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("could not extract a preference from judge output {raw:?}")]
    Unparseable { raw: String },
    #[error("judge backend failed: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no judge voters are configured")]
    NoVoters,
}

/// What to do when the two swapped arrangements disagree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisagreementPolicy {
    /// Keep the incumbent; the candidate needed both arrangements.
    #[default]
    IncumbentWins,
    /// Re-run the full comparison once; a second disagreement keeps the
    /// incumbent.
    RejudgeOnceThenIncumbent,
}

/// Everything a debiased comparison needs besides the two answers.
pub struct JudgeContext<'a> {
    /// Voters; each casts one vote per arrangement. Usually length 1.
    pub judges: &'a [Arc<Gateway>],
    pub template: &'a PromptTemplate,
    pub criteria: &'a [Criterion],
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Score points subtracted per answer token before comparing totals;
    /// zero leaves verdicts untouched.
    pub length_penalty_per_token: f64,
    /// When false, only one arrangement is actually called and the other is
    /// synthesized as its mirror (the single-call ablation).
    pub debias: bool,
    pub disagreement_policy: DisagreementPolicy,
}

/// The comparison result plus the loop-level decision derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDecision {
    pub verdict: DebiasedVerdict,
    /// Whether the loop should adopt the candidate, after the disagreement
    /// policy is applied. The stored verdict keeps the raw outcome.
    pub accept_candidate: bool,
    /// True when the disagreement policy triggered a second comparison.
    pub rejudged: bool,
}

fn preferred_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)preferred\s*:\s*(a|b|tie)\b").unwrap())
}

fn tie_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:a tie|tie|tied|draw|equally good)\b").unwrap())
}

fn qualified_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:answers?|responses?|options?)\s+(a|b)\b").unwrap())
}

fn bare_letter_regex() -> &'static Regex {
    // Deliberately case-sensitive: articles ("prefer a longer answer") must
    // not read as a positional preference.
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([AB])\b").unwrap())
}

fn score_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?m)^\s*(?:\d+[.)]\s*)?([A-Za-z][A-Za-z0-9 _-]*?)\s*:\s*A\s*=\s*(\d+)\s*,?\s+B\s*=\s*(\d+)\s*$",
        )
        .unwrap()
    })
}

fn letter_pref(letter: &str) -> Preference {
    match letter {
        "A" | "a" => Preference::A,
        "B" | "b" => Preference::B,
        _ => Preference::Tie,
    }
}

/// Extracts a [`Verdict`] from raw judge output.
///
/// Signals are tried in priority order: an explicit `Preferred:` line (last
/// one wins), then tie phrasing, then qualified mentions like "answer B"
/// (last one wins), then a bare uppercase `A`/`B` outside score lines, and
/// finally the per-criterion score totals. Output carrying none of these is
/// rejected as unparseable. Score lines of the form `name: A=<n> B=<n>`
/// (0-10) are collected; when they contradict the stated preference the
/// stated preference stands and the scores are dropped.
pub fn parse_verdict(raw: &str) -> Result<Verdict, JudgeError> {
    let mut scores = std::collections::BTreeMap::new();
    for captures in score_line_regex().captures_iter(raw) {
        let a: u32 = match captures[2].parse() {
            Ok(v) if v <= 10 => v,
            _ => continue,
        };
        let b: u32 = match captures[3].parse() {
            Ok(v) if v <= 10 => v,
            _ => continue,
        };
        scores.insert(captures[1].trim().to_string(), (a, b));
    }

    let (preferred, rationale_end) = if let Some(c) = preferred_regex().captures_iter(raw).last() {
        (letter_pref(&c[1]), c.get(0).unwrap().start())
    } else if let Some(m) = tie_regex().find_iter(raw).last() {
        (Preference::Tie, m.start())
    } else if let Some(c) = qualified_regex().captures_iter(raw).last() {
        (letter_pref(&c[1]), c.get(0).unwrap().start())
    } else if let Some((pref, start)) = last_bare_letter(raw) {
        (pref, start)
    } else if !scores.is_empty() {
        let (a, b) = total(&scores);
        let pref = match a.cmp(&b) {
            std::cmp::Ordering::Greater => Preference::A,
            std::cmp::Ordering::Less => Preference::B,
            std::cmp::Ordering::Equal => Preference::Tie,
        };
        (pref, raw.len())
    } else {
        return Err(JudgeError::Unparseable {
            raw: raw.to_string(),
        });
    };

    if !scores.is_empty() {
        let (a, b) = total(&scores);
        let contradicts = match preferred {
            Preference::A => a < b,
            Preference::B => b < a,
            Preference::Tie => false,
        };
        if contradicts {
            scores.clear();
        }
    }

    Ok(Verdict {
        preferred,
        criterion_scores: scores,
        rationale: raw[..rationale_end].trim().to_string(),
        raw_completion: raw.to_string(),
        adjusted_totals: None,
    })
}

/// Last bare uppercase A/B outside any score line.
fn last_bare_letter(raw: &str) -> Option<(Preference, usize)> {
    let stripped = score_line_regex().replace_all(raw, "");
    bare_letter_regex()
        .captures_iter(&stripped)
        .last()
        .map(|c| (letter_pref(&c[1]), c.get(0).unwrap().start().min(raw.len())))
}

fn total(scores: &std::collections::BTreeMap<String, (u32, u32)>) -> (u32, u32) {
    scores
        .values()
        .fold((0, 0), |(a, b), (sa, sb)| (a + sa, b + sb))
}

/// Reads a 0-100 score from grader output; `Score: 85` or, failing that,
/// the last standalone integer in range.
pub fn parse_grade_score(raw: &str) -> Option<u32> {
    static LABELED: OnceLock<Regex> = OnceLock::new();
    static BARE: OnceLock<Regex> = OnceLock::new();
    let labeled = LABELED.get_or_init(|| Regex::new(r"(?i)\bscore\s*[:=]?\s*(\d{1,3})\b").unwrap());
    if let Some(value) = labeled
        .captures_iter(raw)
        .filter_map(|c| c[1].parse::<u32>().ok())
        .filter(|v| *v <= 100)
        .last()
    {
        return Some(value);
    }
    let bare = BARE.get_or_init(|| Regex::new(r"\b(\d{1,3})\b").unwrap());
    bare.captures_iter(raw)
        .filter_map(|c| c[1].parse::<u32>().ok())
        .filter(|v| *v <= 100)
        .last()
}

/// Subtracts `penalty_per_token * answer_tokens` from each side's score
/// total and re-derives the preference from the adjusted totals. Verdicts
/// without scores, and a zero penalty, pass through unchanged.
pub fn apply_length_penalty(
    verdict: &mut Verdict,
    tokens_a: usize,
    tokens_b: usize,
    penalty_per_token: f64,
) {
    if penalty_per_token == 0.0 {
        return;
    }
    let Some((raw_a, raw_b)) = verdict.score_totals() else {
        return;
    };
    let adjusted_a = f64::from(raw_a) - penalty_per_token * tokens_a as f64;
    let adjusted_b = f64::from(raw_b) - penalty_per_token * tokens_b as f64;
    verdict.adjusted_totals = Some((adjusted_a, adjusted_b));
    verdict.preferred = if adjusted_a > adjusted_b {
        Preference::A
    } else if adjusted_b > adjusted_a {
        Preference::B
    } else {
        Preference::Tie
    };
}

/// How one arrangement of one comparison came out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArrangementWinner {
    Candidate,
    Incumbent,
    Neither,
}

fn winner_of(preferred: Preference, candidate_side: Preference) -> ArrangementWinner {
    if preferred == Preference::Tie {
        ArrangementWinner::Neither
    } else if preferred == candidate_side {
        ArrangementWinner::Candidate
    } else {
        ArrangementWinner::Incumbent
    }
}

/// Runs the position-debiased comparison between the chain's current answer
/// and a refinement candidate.
///
/// The first call shows the incumbent as Answer A and the candidate as
/// Answer B; the second call swaps them. Each configured voter votes in both
/// arrangements; an arrangement goes to whichever side holds a strict
/// majority. The candidate wins outright only when it takes both
/// arrangements. Unparseable votes are re-asked once and then default to
/// the incumbent's side.
pub fn judge_pair(
    ctx: &JudgeContext,
    query: &str,
    incumbent: &str,
    candidate: &str,
) -> Result<PairDecision, JudgeError> {
    if ctx.judges.is_empty() {
        return Err(JudgeError::NoVoters);
    }
    let first = run_comparison(ctx, query, incumbent, candidate)?;
    let (verdict, rejudged) = match (first.outcome, ctx.disagreement_policy) {
        (DebiasedOutcome::Disagreement, DisagreementPolicy::RejudgeOnceThenIncumbent) => {
            (run_comparison(ctx, query, incumbent, candidate)?, true)
        }
        _ => (first, false),
    };
    let accept_candidate = verdict.outcome == DebiasedOutcome::CandidateWins;
    Ok(PairDecision {
        verdict,
        accept_candidate,
        rejudged,
    })
}

fn run_comparison(
    ctx: &JudgeContext,
    query: &str,
    incumbent: &str,
    candidate: &str,
) -> Result<DebiasedVerdict, JudgeError> {
    // Arrangement 1: incumbent is A, candidate is B.
    let (first_call, first_winner) =
        run_arrangement(ctx, query, incumbent, candidate, Preference::B)?;
    let (second_call, second_winner) = if ctx.debias {
        // Arrangement 2: candidate is A, incumbent is B.
        run_arrangement(ctx, query, candidate, incumbent, Preference::A)?
    } else {
        let mirrored = mirror_verdict(&first_call);
        let winner = winner_of(mirrored.preferred, Preference::A);
        (mirrored, winner)
    };
    let outcome = match (first_winner, second_winner) {
        (ArrangementWinner::Candidate, ArrangementWinner::Candidate) => {
            DebiasedOutcome::CandidateWins
        }
        (ArrangementWinner::Incumbent, ArrangementWinner::Incumbent) => {
            DebiasedOutcome::IncumbentWins
        }
        _ => DebiasedOutcome::Disagreement,
    };
    Ok(DebiasedVerdict {
        first_call,
        second_call,
        outcome,
    })
}

/// One arrangement: renders the prompt with the given A/B texts, collects
/// one penalty-adjusted vote per voter, and majority-merges them.
fn run_arrangement(
    ctx: &JudgeContext,
    query: &str,
    text_a: &str,
    text_b: &str,
    candidate_side: Preference,
) -> Result<(Verdict, ArrangementWinner), JudgeError> {
    let prompt = render_judge(ctx.template, query, text_a, text_b, ctx.criteria)?;
    let tokens_a = canonical_token_count(text_a);
    let tokens_b = canonical_token_count(text_b);
    let incumbent_side = if candidate_side == Preference::A {
        Preference::B
    } else {
        Preference::A
    };

    let mut votes = Vec::with_capacity(ctx.judges.len());
    for judge in ctx.judges {
        let mut verdict = vote_once(ctx, judge, &prompt, incumbent_side)?;
        apply_length_penalty(
            &mut verdict,
            tokens_a,
            tokens_b,
            ctx.length_penalty_per_token,
        );
        votes.push(verdict);
    }

    if votes.len() == 1 {
        let verdict = votes.pop().unwrap();
        let winner = winner_of(verdict.preferred, candidate_side);
        return Ok((verdict, winner));
    }

    let candidate_votes = votes
        .iter()
        .filter(|v| v.preferred == candidate_side)
        .count();
    let incumbent_votes = votes
        .iter()
        .filter(|v| v.preferred == incumbent_side)
        .count();
    let (winner, preferred) = if candidate_votes > incumbent_votes {
        (ArrangementWinner::Candidate, candidate_side)
    } else if incumbent_votes > candidate_votes {
        (ArrangementWinner::Incumbent, incumbent_side)
    } else {
        (ArrangementWinner::Neither, Preference::Tie)
    };
    let raw_completion = votes
        .iter()
        .enumerate()
        .map(|(i, v)| format!("=== voter {} ===\n{}", i + 1, v.raw_completion))
        .collect::<Vec<_>>()
        .join("\n");
    let merged = Verdict {
        preferred,
        criterion_scores: std::collections::BTreeMap::new(),
        rationale: format!(
            "majority of {} voters: {candidate_votes} for the candidate side, {incumbent_votes} for the incumbent side",
            votes.len()
        ),
        raw_completion,
        adjusted_totals: None,
    };
    Ok((merged, winner))
}

/// One voter's vote on one arrangement: call, parse, re-ask once on
/// unparseable output, and finally default to the incumbent's side.
fn vote_once(
    ctx: &JudgeContext,
    judge: &Gateway,
    prompt: &str,
    incumbent_side: Preference,
) -> Result<Verdict, JudgeError> {
    let request = CallRequest {
        tag: CallTag::Judge,
        user: prompt.to_string(),
        temperature: ctx.temperature,
        max_tokens: ctx.max_tokens,
    };
    let mut last_raw = String::new();
    for _ in 0..2 {
        let response = judge.call(&request)?;
        match parse_verdict(&response.text) {
            Ok(verdict) => return Ok(verdict),
            Err(JudgeError::Unparseable { raw }) => last_raw = raw,
            Err(other) => return Err(other),
        }
    }
    Ok(Verdict {
        preferred: incumbent_side,
        criterion_scores: std::collections::BTreeMap::new(),
        rationale: "verdict unparseable after one re-ask; defaulting to the incumbent".to_string(),
        raw_completion: last_raw,
        adjusted_totals: None,
    })
}

/// The synthesized opposite arrangement for the single-call ablation:
/// positions swap, so the preferred letter flips and per-side data swaps.
fn mirror_verdict(first: &Verdict) -> Verdict {
    let preferred = match first.preferred {
        Preference::A => Preference::B,
        Preference::B => Preference::A,
        Preference::Tie => Preference::Tie,
    };
    Verdict {
        preferred,
        criterion_scores: first
            .criterion_scores
            .iter()
            .map(|(name, (a, b))| (name.clone(), (*b, *a)))
            .collect(),
        rationale: "mirrored from the single-call arrangement".to_string(),
        raw_completion: first.raw_completion.clone(),
        adjusted_totals: first.adjusted_totals.map(|(a, b)| (b, a)),
    }
}

/// Picks a judge voter arrangement order for experiments that randomize
/// which answer is shown first; used by the consistency analysis.
pub fn randomized_pair_order<'a>(
    rng: &mut impl Rng,
    left: &'a str,
    right: &'a str,
) -> (&'a str, &'a str, bool) {
    if rng.gen_bool(0.5) {
        (left, right, false)
    } else {
        (right, left, true)
    }
}
