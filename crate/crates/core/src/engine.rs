//! The refinement loop: grow a preference chain one judged refinement at a
//! time, plus the two baseline strategies (judge-free refinement and
//! best-of-n sampling) used to measure what the judge contributes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{CallRequest, CallTag, Gateway, GatewayError, UsageReport};
use crate::chain::{Answer, AnswerOrigin, PreferenceChain, QueryRecord, Termination};
use crate::judge::{judge_pair, DisagreementPolicy, JudgeContext, JudgeError};
use crate::prompt::{render_feedback, render_refine, Criterion, PromptError, TemplateSet};

/// How best-of-n picks its winner.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestOfSelector {
    /// Sequential debiased pairwise elimination; the survivor wins.
    #[default]
    PairwiseElimination,
    /// One prompt listing every candidate; the judge names the best by
    /// number. Cheaper but position-sensitive.
    SinglePrompt,
}

/// Knobs of the refinement loop and baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSettings {
    /// Cap on accepted refinements; a chain holds at most this many plus
    /// the first answer.
    pub max_refinements: usize,
    /// Samples drawn by the best-of-n baseline.
    pub best_of_n: usize,
    /// Extra zero-shot draws allowed when best-of-n samples are refused.
    pub max_resamples: usize,
    pub best_of_selector: BestOfSelector,
    pub refine_temperature: f64,
    pub judge_temperature: f64,
    pub max_output_tokens: Option<u32>,
    /// Judge-score points charged per answer token when comparing.
    pub length_penalty_per_token: f64,
    /// When false, comparisons use one judge call and a mirrored synthetic
    /// second arrangement.
    pub debias: bool,
    pub disagreement_policy: DisagreementPolicy,
}

impl Default for LoopSettings {
    fn default() -> Self {
        LoopSettings {
            max_refinements: 10,
            best_of_n: 10,
            max_resamples: 0,
            best_of_selector: BestOfSelector::default(),
            refine_temperature: 0.7,
            judge_temperature: 0.0,
            max_output_tokens: None,
            length_penalty_per_token: 0.0,
            debias: true,
            disagreement_policy: DisagreementPolicy::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("backend refused the request: {message}")]
    Refusal { message: String },
    /// The run could not produce any answer for the record.
    #[error("no first answer could be produced: {message}")]
    SeedFailed { message: String },
    #[error("fatal failure: {message}")]
    Fatal { message: String },
    /// Internal signal: a refine call returned empty text twice. Converted
    /// into a backend-failure termination when a partial chain exists.
    #[error("refinement came back empty twice")]
    EmptyRefinement,
}

impl EngineError {
    /// Failure class recorded against the input record.
    pub fn class(&self) -> &'static str {
        match self {
            EngineError::Refusal { .. } => "refusal",
            EngineError::SeedFailed { .. } => "backend",
            EngineError::EmptyRefinement => "backend",
            EngineError::Fatal { .. } => "fatal",
        }
    }
}

/// What a fallible mid-chain step should do to the chain.
enum StepFailure {
    /// Stop here, keep the partial chain, mark backend_failure.
    Truncate,
    /// Abandon the record with this error.
    Abort(EngineError),
}

fn classify_gateway(error: GatewayError) -> StepFailure {
    match error {
        GatewayError::Exhausted { .. } => StepFailure::Truncate,
        GatewayError::Refusal { message } => StepFailure::Abort(EngineError::Refusal { message }),
        GatewayError::Fatal { message } => StepFailure::Abort(EngineError::Fatal { message }),
    }
}

fn classify_judge(error: JudgeError) -> StepFailure {
    match error {
        JudgeError::Backend(gateway) => classify_gateway(gateway),
        JudgeError::Unparseable { raw } => StepFailure::Abort(EngineError::Fatal {
            message: format!("verdict slipped through unparsed: {raw:?}"),
        }),
        JudgeError::Prompt(e) => StepFailure::Abort(EngineError::Fatal {
            message: e.to_string(),
        }),
        JudgeError::NoVoters => StepFailure::Abort(EngineError::Fatal {
            message: "no judge voters are configured".to_string(),
        }),
    }
}

/// Runs chains for one record at a time. Shared read-only across workers.
pub struct Engine {
    refiner: Arc<Gateway>,
    judges: Vec<Arc<Gateway>>,
    templates: TemplateSet,
    criteria: Vec<Criterion>,
    settings: LoopSettings,
}

impl Engine {
    pub fn new(
        refiner: Arc<Gateway>,
        judges: Vec<Arc<Gateway>>,
        templates: TemplateSet,
        criteria: Vec<Criterion>,
        settings: LoopSettings,
    ) -> Self {
        Engine {
            refiner,
            judges,
            templates,
            criteria,
            settings,
        }
    }

    pub fn settings(&self) -> &LoopSettings {
        &self.settings
    }

    /// Combined usage across the refiner and every judge voter. Voters may
    /// share one gateway (and the judge may share the refiner's), so each
    /// distinct gateway is counted once.
    pub fn usage_report(&self) -> UsageReport {
        let mut merged = self.refiner.usage_report();
        let mut seen: Vec<&Arc<Gateway>> = vec![&self.refiner];
        for judge in &self.judges {
            if seen.iter().any(|g| Arc::ptr_eq(g, judge)) {
                continue;
            }
            merged.absorb(&judge.usage_report());
            seen.push(judge);
        }
        merged
    }

    fn judge_context(&self) -> JudgeContext<'_> {
        JudgeContext {
            judges: &self.judges,
            template: &self.templates.judge,
            criteria: &self.criteria,
            temperature: self.settings.judge_temperature,
            max_tokens: self.settings.max_output_tokens,
            length_penalty_per_token: self.settings.length_penalty_per_token,
            debias: self.settings.debias,
            disagreement_policy: self.settings.disagreement_policy,
        }
    }

    /// One completion call; empty output is retried once.
    fn completion(&self, tag: CallTag, prompt: &str) -> Result<String, StepFailure> {
        let request = CallRequest {
            tag,
            user: prompt.to_string(),
            temperature: self.settings.refine_temperature,
            max_tokens: self.settings.max_output_tokens,
        };
        for _ in 0..2 {
            match self.refiner.call(&request) {
                Ok(response) => {
                    let text = response.text.trim();
                    if !text.is_empty() {
                        return Ok(text.to_string());
                    }
                }
                Err(e) => return Err(classify_gateway(e)),
            }
        }
        Err(StepFailure::Abort(EngineError::EmptyRefinement))
    }

    /// The first answer: the record's own, or a zero-shot completion of the
    /// bare query.
    fn first_answer(&self, record: &QueryRecord) -> Result<Answer, EngineError> {
        if let Some(seed) = &record.initial_answer {
            return Ok(Answer::new(0, seed.trim(), AnswerOrigin::Seed));
        }
        match self.completion(CallTag::ZeroShot, &record.query) {
            Ok(text) => Ok(Answer::new(0, text, AnswerOrigin::ZeroShot)),
            Err(StepFailure::Abort(EngineError::Refusal { message })) => {
                Err(EngineError::Refusal { message })
            }
            Err(StepFailure::Abort(EngineError::EmptyRefinement)) => Err(EngineError::SeedFailed {
                message: "zero-shot completion came back empty twice".to_string(),
            }),
            Err(StepFailure::Abort(e)) => Err(e),
            Err(StepFailure::Truncate) => Err(EngineError::SeedFailed {
                message: "backend retries exhausted before any answer existed".to_string(),
            }),
        }
    }

    /// One feedback-then-rewrite round against the current answer.
    pub fn refine_once(&self, query: &str, answer: &str) -> Result<(String, String), EngineError> {
        self.refine_step(query, answer)
            .map_err(|failure| match failure {
                StepFailure::Abort(e) => e,
                StepFailure::Truncate => EngineError::SeedFailed {
                    message: "backend retries exhausted during refinement".to_string(),
                },
            })
    }

    fn refine_step(&self, query: &str, answer: &str) -> Result<(String, String), StepFailure> {
        let feedback_prompt =
            render_feedback(&self.templates.feedback, query, answer, &self.criteria)
                .map_err(prompt_abort)?;
        let feedback = self.completion(CallTag::Feedback, &feedback_prompt)?;
        let refine_prompt = render_refine(&self.templates.refine, query, answer, &feedback)
            .map_err(prompt_abort)?;
        let refined = self.completion(CallTag::Refine, &refine_prompt)?;
        Ok((feedback, refined))
    }

    /// Grows a chain until the judge declines a refinement, the cap is
    /// reached, or the backend gives out.
    ///
    /// A refusal anywhere abandons the record. Exhausted retries mid-chain
    /// keep what was built and mark the chain `backend_failure`.
    pub fn run_chain(&self, record: &QueryRecord) -> Result<PreferenceChain, EngineError> {
        let first = self.first_answer(record)?;
        let mut chain = PreferenceChain {
            record_id: record.id.clone(),
            query: record.query.clone(),
            answers: vec![first],
            rejected_candidate: None,
            step_verdicts: Vec::new(),
            termination: Termination::MaxIterations,
        };

        while chain.answers.len() - 1 < self.settings.max_refinements {
            let incumbent = chain.answers.last().expect("chain starts non-empty");
            let (feedback, refined) = match self.refine_step(&record.query, &incumbent.text) {
                Ok(round) => round,
                Err(StepFailure::Truncate)
                | Err(StepFailure::Abort(EngineError::EmptyRefinement)) => {
                    chain.termination = Termination::BackendFailure;
                    return Ok(chain);
                }
                Err(StepFailure::Abort(e)) => return Err(e),
            };
            let candidate = Answer::new(chain.answers.len(), refined, AnswerOrigin::Refined)
                .with_feedback(feedback);

            let decision = match judge_pair(
                &self.judge_context(),
                &record.query,
                &incumbent.text,
                &candidate.text,
            ) {
                Ok(decision) => decision,
                Err(e) => match classify_judge(e) {
                    StepFailure::Truncate => {
                        chain.termination = Termination::BackendFailure;
                        return Ok(chain);
                    }
                    StepFailure::Abort(e) => return Err(e),
                },
            };

            if decision.accept_candidate {
                chain.step_verdicts.push(decision.verdict);
                chain.answers.push(candidate);
            } else {
                chain.rejected_candidate = Some(candidate);
                chain.termination = Termination::JudgeStop;
                return Ok(chain);
            }
        }
        chain.termination = Termination::MaxIterations;
        Ok(chain)
    }

    /// Judge-free baseline: apply `n_steps` refinement rounds and keep
    /// every rewrite. No judge calls are made, so the trace carries no
    /// step verdicts.
    pub fn run_refiner_only(
        &self,
        record: &QueryRecord,
        n_steps: usize,
    ) -> Result<PreferenceChain, EngineError> {
        let first = self.first_answer(record)?;
        let mut chain = PreferenceChain {
            record_id: record.id.clone(),
            query: record.query.clone(),
            answers: vec![first],
            rejected_candidate: None,
            step_verdicts: Vec::new(),
            termination: Termination::MaxIterations,
        };
        for index in 1..=n_steps {
            let current = &chain.answers[index - 1];
            let (feedback, refined) = match self.refine_step(&record.query, &current.text) {
                Ok(round) => round,
                Err(StepFailure::Truncate)
                | Err(StepFailure::Abort(EngineError::EmptyRefinement)) => {
                    chain.termination = Termination::BackendFailure;
                    return Ok(chain);
                }
                Err(StepFailure::Abort(e)) => return Err(e),
            };
            chain
                .answers
                .push(Answer::new(index, refined, AnswerOrigin::Refined).with_feedback(feedback));
        }
        Ok(chain)
    }

    /// Best-of-n baseline: draw `best_of_n` zero-shot samples for the bare
    /// query and keep the judged best. Any seed answer on the record is
    /// ignored — every candidate is a fresh sample. Refused or exhausted
    /// draws are skipped, with up to `max_resamples` replacement draws.
    pub fn run_best_of_n(&self, record: &QueryRecord) -> Result<PreferenceChain, EngineError> {
        let n = self.settings.best_of_n.max(1);
        let mut candidates: Vec<String> = Vec::with_capacity(n);
        let mut draws = 0usize;
        let mut last_refusal: Option<String> = None;
        while candidates.len() < n && draws < n + self.settings.max_resamples {
            draws += 1;
            match self.completion(CallTag::ZeroShot, &record.query) {
                Ok(text) => candidates.push(text),
                Err(StepFailure::Abort(EngineError::Refusal { message })) => {
                    last_refusal = Some(message);
                }
                Err(StepFailure::Truncate)
                | Err(StepFailure::Abort(EngineError::EmptyRefinement)) => {}
                Err(StepFailure::Abort(e)) => return Err(e),
            }
        }
        if candidates.is_empty() {
            return Err(match last_refusal {
                Some(message) => EngineError::Refusal { message },
                None => EngineError::SeedFailed {
                    message: format!("all {draws} sample draws failed"),
                },
            });
        }

        let champion = match self.settings.best_of_selector {
            BestOfSelector::PairwiseElimination => {
                match self.eliminate_pairwise(&record.query, &candidates) {
                    Ok(text) => text,
                    Err(StepFailure::Truncate) => {
                        // Judging broke down; fall back to the current
                        // front-runner and mark the trace truncated.
                        let mut chain = best_of_chain(record, candidates[0].clone());
                        chain.termination = Termination::BackendFailure;
                        return Ok(chain);
                    }
                    Err(StepFailure::Abort(e)) => return Err(e),
                }
            }
            BestOfSelector::SinglePrompt => {
                match self.select_single_prompt(&record.query, &candidates) {
                    Ok(text) => text,
                    Err(StepFailure::Truncate) => {
                        let mut chain = best_of_chain(record, candidates[0].clone());
                        chain.termination = Termination::BackendFailure;
                        return Ok(chain);
                    }
                    Err(StepFailure::Abort(e)) => return Err(e),
                }
            }
        };
        Ok(best_of_chain(record, champion))
    }

    /// Debiased pairwise tournament: the earliest candidate stands until a
    /// later one beats it in both arrangements, so ties keep the incumbent.
    fn eliminate_pairwise(
        &self,
        query: &str,
        candidates: &[String],
    ) -> Result<String, StepFailure> {
        let mut champion = candidates[0].clone();
        for challenger in &candidates[1..] {
            let decision = judge_pair(&self.judge_context(), query, &champion, challenger)
                .map_err(classify_judge)?;
            if decision.accept_candidate {
                champion = challenger.clone();
            }
        }
        Ok(champion)
    }

    /// One judge call over a numbered list; an unusable reply falls back to
    /// the first candidate.
    fn select_single_prompt(
        &self,
        query: &str,
        candidates: &[String],
    ) -> Result<String, StepFailure> {
        let mut prompt = format!(
            "Pick the best of the {} numbered answers below.\n\nQuestion:\n{query}\n",
            candidates.len()
        );
        for (i, candidate) in candidates.iter().enumerate() {
            prompt.push_str(&format!("\nAnswer {}:\n{candidate}\n", i + 1));
        }
        prompt.push_str("\nReply with the number of the best answer.");
        let request = CallRequest {
            tag: CallTag::Judge,
            user: prompt,
            temperature: self.settings.judge_temperature,
            max_tokens: self.settings.max_output_tokens,
        };
        let response = self
            .judges
            .first()
            .ok_or(StepFailure::Abort(EngineError::Fatal {
                message: "no judge voters are configured".to_string(),
            }))?;
        let response = response.call(&request).map_err(classify_gateway)?;
        let index = parse_choice_index(&response.text, candidates.len()).unwrap_or(0);
        Ok(candidates[index].clone())
    }
}

fn prompt_abort(e: PromptError) -> StepFailure {
    StepFailure::Abort(EngineError::Fatal {
        message: e.to_string(),
    })
}

fn best_of_chain(record: &QueryRecord, champion: String) -> PreferenceChain {
    PreferenceChain {
        record_id: record.id.clone(),
        query: record.query.clone(),
        answers: vec![Answer::new(0, champion, AnswerOrigin::ZeroShot)],
        rejected_candidate: None,
        step_verdicts: Vec::new(),
        termination: Termination::MaxIterations,
    }
}

/// Last standalone integer in `1..=n`, as a zero-based index.
fn parse_choice_index(raw: &str, n: usize) -> Option<usize> {
    let mut found = None;
    for token in raw.split(|c: char| !c.is_ascii_digit()) {
        if token.is_empty() || token.len() > 3 {
            continue;
        }
        if let Ok(value) = token.parse::<usize>() {
            if (1..=n).contains(&value) {
                found = Some(value - 1);
            }
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::script::{ScriptRule, ScriptedBackend};
    use crate::backend::sim::{MarkerQualityJudge, SequenceBackend};
    use crate::backend::{Backend, BackendError, CallResponse, RetryPolicy};
    use crate::chain::{validate_chain, DebiasedOutcome};
    use crate::prompt::default_criteria;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn gateway(backend: impl Backend + 'static) -> Arc<Gateway> {
        Arc::new(
            Gateway::new(Arc::new(backend), RetryPolicy::immediate(1), None).with_sleeper(|_| {}),
        )
    }

    fn engine(refiner: impl Backend + 'static, judge: impl Backend + 'static) -> Engine {
        engine_with(gateway(refiner), gateway(judge), LoopSettings::default())
    }

    fn engine_with(refiner: Arc<Gateway>, judge: Arc<Gateway>, settings: LoopSettings) -> Engine {
        Engine::new(
            refiner,
            vec![judge],
            crate::prompt::TemplateSet::builtin(),
            default_criteria(),
            settings,
        )
    }

    fn record(id: &str, query: &str, seed: Option<&str>) -> QueryRecord {
        QueryRecord {
            id: id.to_string(),
            query: query.to_string(),
            initial_answer: seed.map(str::to_string),
            metadata: Default::default(),
        }
    }

    /// Script that improves a [[q3]] answer to [[q5]] and then degrades it
    /// to [[q4]], the canonical accept-then-reject sequence.
    fn rise_then_fall_refiner() -> ScriptedBackend {
        ScriptedBackend::new(
            vec![
                ScriptRule::new("feedback", "*", "tighten the wording"),
                ScriptRule::new("refine", "[[q3]]", "improved answer [[q5]]"),
                ScriptRule::new("refine", "[[q5]]", "overworked answer [[q4]]"),
            ],
            true,
        )
    }

    #[test]
    fn judge_stop_keeps_rejected_candidate_and_validates() {
        let engine = engine(rise_then_fall_refiner(), MarkerQualityJudge);
        let chain = engine
            .run_chain(&record("r1", "Q?", Some("seed answer [[q3]]")))
            .unwrap();
        assert_eq!(chain.termination, Termination::JudgeStop);
        let texts: Vec<&str> = chain.answers.iter().map(|a| a.text.as_str()).collect();
        assert_eq!(texts, vec!["seed answer [[q3]]", "improved answer [[q5]]"]);
        assert_eq!(
            chain.rejected_candidate.as_ref().unwrap().text,
            "overworked answer [[q4]]"
        );
        assert_eq!(chain.step_verdicts.len(), 1);
        assert_eq!(
            chain.step_verdicts[0].outcome,
            DebiasedOutcome::CandidateWins
        );
        assert_eq!(
            chain.answers[1].feedback_used.as_deref(),
            Some("tighten the wording")
        );
        assert_eq!(validate_chain(&chain, 10), Vec::<String>::new());
    }

    #[test]
    fn judge_stop_call_counts_follow_the_contract() {
        // k accepted refinements before the stop: k+1 feedback, k+1
        // refine, 2(k+1) judge calls. Here k = 1.
        let engine = engine(rise_then_fall_refiner(), MarkerQualityJudge);
        engine
            .run_chain(&record("r1", "Q?", Some("seed answer [[q3]]")))
            .unwrap();
        let usage = engine.usage_report();
        assert_eq!(usage.calls(CallTag::Feedback), 2);
        assert_eq!(usage.calls(CallTag::Refine), 2);
        assert_eq!(usage.calls(CallTag::Judge), 4);
        assert_eq!(usage.calls(CallTag::ZeroShot), 0);
    }

    /// Rules that climb one quality step per refinement, indefinitely.
    fn ever_improving_refiner(top: i64) -> ScriptedBackend {
        let mut rules = vec![ScriptRule::new("feedback", "*", "push further")];
        for q in 0..top {
            rules.push(ScriptRule::new(
                "refine",
                format!("[[q{q}]]"),
                format!("level {} [[q{}]]", q + 1, q + 1),
            ));
        }
        ScriptedBackend::new(rules, true)
    }

    #[test]
    fn cap_stops_runaway_improvement_with_exact_counts() {
        let engine = engine(ever_improving_refiner(40), MarkerQualityJudge);
        let chain = engine
            .run_chain(&record("r1", "Q?", Some("start [[q0]]")))
            .unwrap();
        assert_eq!(chain.termination, Termination::MaxIterations);
        assert_eq!(
            chain.answers.len(),
            11,
            "cap of 10 refinements plus the seed"
        );
        assert!(chain.rejected_candidate.is_none());
        assert_eq!(validate_chain(&chain, 10), Vec::<String>::new());
        let usage = engine.usage_report();
        assert_eq!(usage.calls(CallTag::Feedback), 10);
        assert_eq!(usage.calls(CallTag::Refine), 10);
        assert_eq!(usage.calls(CallTag::Judge), 20);
    }

    #[test]
    fn zero_shot_seeds_records_without_answers() {
        let mut rules = vec![
            ScriptRule::new("zero_shot", "*", "fresh start [[q3]]"),
            ScriptRule::new("feedback", "*", "needs work"),
            ScriptRule::new("refine", "[[q3]]", "downhill [[q2]]"),
        ];
        rules.push(ScriptRule::new("refine", "*", "filler"));
        let engine = engine(ScriptedBackend::new(rules, true), MarkerQualityJudge);
        let chain = engine.run_chain(&record("r1", "Q?", None)).unwrap();
        assert_eq!(chain.answers[0].origin, AnswerOrigin::ZeroShot);
        assert_eq!(chain.answers[0].text, "fresh start [[q3]]");
        assert_eq!(chain.termination, Termination::JudgeStop);
        assert_eq!(engine.usage_report().calls(CallTag::ZeroShot), 1);
    }

    #[test]
    fn refusal_mid_chain_abandons_the_record() {
        // Strict script with no refine rule: the first refine call refuses.
        let refiner = ScriptedBackend::new(
            vec![ScriptRule::new("feedback", "*", "fine feedback")],
            true,
        );
        let engine = engine(refiner, MarkerQualityJudge);
        let err = engine
            .run_chain(&record("r1", "Q?", Some("seed [[q3]]")))
            .unwrap_err();
        assert!(matches!(err, EngineError::Refusal { .. }), "{err}");
        assert_eq!(err.class(), "refusal");
    }

    /// Succeeds for feedback, then always times out for refine calls.
    struct RefineOutage;

    impl Backend for RefineOutage {
        fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
            match request.tag {
                CallTag::Feedback => Ok(CallResponse {
                    text: "solid notes".into(),
                    prompt_tokens: 1,
                    completion_tokens: 2,
                }),
                _ => Err(BackendError::Transient {
                    status: None,
                    message: "timeout".into(),
                }),
            }
        }

        fn name(&self) -> &str {
            "refine-outage"
        }
    }

    #[test]
    fn exhausted_retries_mid_chain_truncate_instead_of_failing() {
        let engine = engine(RefineOutage, MarkerQualityJudge);
        let chain = engine
            .run_chain(&record("r1", "Q?", Some("seed [[q3]]")))
            .unwrap();
        assert_eq!(chain.termination, Termination::BackendFailure);
        assert_eq!(chain.answers.len(), 1);
        assert!(chain.rejected_candidate.is_none());
        assert_eq!(validate_chain(&chain, 10), Vec::<String>::new());
    }

    /// The judge's network is down; refiner works fine.
    struct JudgeOutage;

    impl Backend for JudgeOutage {
        fn call(&self, _request: &CallRequest) -> Result<CallResponse, BackendError> {
            Err(BackendError::Transient {
                status: Some(503),
                message: "unavailable".into(),
            })
        }

        fn name(&self) -> &str {
            "judge-outage"
        }
    }

    #[test]
    fn judge_outage_truncates_with_candidate_dropped() {
        let engine = engine(rise_then_fall_refiner(), JudgeOutage);
        let chain = engine
            .run_chain(&record("r1", "Q?", Some("seed answer [[q3]]")))
            .unwrap();
        assert_eq!(chain.termination, Termination::BackendFailure);
        // The unjudged candidate is not adopted and not stored as rejected.
        assert_eq!(chain.answers.len(), 1);
        assert!(chain.rejected_candidate.is_none());
    }

    #[test]
    fn seed_failure_before_any_answer_fails_the_record() {
        let engine = engine(JudgeOutage, MarkerQualityJudge); // refiner always transient
        let err = engine.run_chain(&record("r1", "Q?", None)).unwrap_err();
        assert!(matches!(err, EngineError::SeedFailed { .. }), "{err}");
        assert_eq!(err.class(), "backend");
    }

    /// Counts refine calls and always returns empty text.
    struct EmptyRefiner {
        refine_calls: AtomicUsize,
    }

    impl Backend for EmptyRefiner {
        fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
            let text = match request.tag {
                CallTag::Feedback => "could be tighter",
                CallTag::Refine => {
                    self.refine_calls.fetch_add(1, Ordering::SeqCst);
                    "   "
                }
                _ => "unused",
            };
            Ok(CallResponse {
                text: text.into(),
                prompt_tokens: 1,
                completion_tokens: 1,
            })
        }

        fn name(&self) -> &str {
            "empty-refiner"
        }
    }

    #[test]
    fn empty_refinements_retry_once_then_truncate() {
        let refiner = Arc::new(EmptyRefiner {
            refine_calls: AtomicUsize::new(0),
        });
        let refiner_gateway = Arc::new(
            Gateway::new(refiner.clone(), RetryPolicy::immediate(0), None).with_sleeper(|_| {}),
        );
        let engine = engine_with(
            refiner_gateway,
            gateway(MarkerQualityJudge),
            LoopSettings::default(),
        );
        let chain = engine
            .run_chain(&record("r1", "Q?", Some("seed [[q3]]")))
            .unwrap();
        assert_eq!(chain.termination, Termination::BackendFailure);
        assert_eq!(
            refiner.refine_calls.load(Ordering::SeqCst),
            2,
            "one retry, then give up"
        );
    }

    #[test]
    fn refiner_only_keeps_every_rewrite_without_judging() {
        let refiner = ScriptedBackend::new(
            vec![
                ScriptRule::new("feedback", "*", "change it"),
                ScriptRule::new("refine", "[[q5]]", "drift one [[q4]]"),
                ScriptRule::new("refine", "[[q4]]", "drift two [[q3]]"),
            ],
            true,
        );
        let engine = engine(refiner, MarkerQualityJudge);
        let chain = engine
            .run_refiner_only(&record("r1", "Q?", Some("seed [[q5]]")), 2)
            .unwrap();
        assert_eq!(chain.answers.len(), 3);
        assert_eq!(chain.answers[2].text, "drift two [[q3]]");
        assert!(chain.step_verdicts.is_empty());
        assert_eq!(chain.termination, Termination::MaxIterations);
        let usage = engine.usage_report();
        assert_eq!(
            usage.calls(CallTag::Judge),
            0,
            "the baseline must never judge"
        );
        assert_eq!(usage.calls(CallTag::Feedback), 2);
        assert_eq!(usage.calls(CallTag::Refine), 2);
    }

    #[test]
    fn best_of_n_keeps_judged_best_with_exact_counts() {
        let samples = SequenceBackend::new(
            CallTag::ZeroShot,
            vec![
                "sample one [[q2]]".into(),
                "sample two [[q7]]".into(),
                "sample three [[q5]]".into(),
                "sample four [[q1]]".into(),
            ],
        );
        let settings = LoopSettings {
            best_of_n: 4,
            ..LoopSettings::default()
        };
        let engine = engine_with(gateway(samples), gateway(MarkerQualityJudge), settings);
        let chain = engine.run_best_of_n(&record("r1", "Q?", None)).unwrap();
        assert_eq!(chain.answers.len(), 1);
        assert_eq!(chain.answers[0].text, "sample two [[q7]]");
        assert_eq!(chain.answers[0].origin, AnswerOrigin::ZeroShot);
        assert_eq!(validate_chain(&chain, 10), Vec::<String>::new());
        let usage = engine.usage_report();
        assert_eq!(usage.calls(CallTag::ZeroShot), 4);
        assert_eq!(
            usage.calls(CallTag::Judge),
            6,
            "two calls per elimination round"
        );
        assert_eq!(usage.calls(CallTag::Feedback), 0);
    }

    #[test]
    fn best_of_n_ties_keep_the_earliest_sample() {
        let samples = SequenceBackend::new(
            CallTag::ZeroShot,
            vec![
                "first [[q3]]".into(),
                "second [[q3]]".into(),
                "third [[q3]]".into(),
            ],
        );
        let settings = LoopSettings {
            best_of_n: 3,
            ..LoopSettings::default()
        };
        let engine = engine_with(gateway(samples), gateway(MarkerQualityJudge), settings);
        let chain = engine.run_best_of_n(&record("r1", "Q?", None)).unwrap();
        assert_eq!(chain.answers[0].text, "first [[q3]]");
    }

    /// Refuses the first `refusals` calls, then yields numbered samples.
    struct RefuseThenSample {
        refusals: usize,
        seen: AtomicUsize,
    }

    impl Backend for RefuseThenSample {
        fn call(&self, _request: &CallRequest) -> Result<CallResponse, BackendError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.refusals {
                Err(BackendError::Refusal {
                    message: "not this one".into(),
                })
            } else {
                let text = format!("draw {n} [[q{n}]]");
                Ok(CallResponse {
                    text,
                    prompt_tokens: 1,
                    completion_tokens: 3,
                })
            }
        }

        fn name(&self) -> &str {
            "refuse-then-sample"
        }
    }

    #[test]
    fn best_of_n_resamples_refused_draws_when_allowed() {
        let settings = LoopSettings {
            best_of_n: 2,
            max_resamples: 1,
            ..LoopSettings::default()
        };
        let refiner = RefuseThenSample {
            refusals: 1,
            seen: AtomicUsize::new(0),
        };
        let engine = engine_with(gateway(refiner), gateway(MarkerQualityJudge), settings);
        let chain = engine.run_best_of_n(&record("r1", "Q?", None)).unwrap();
        // Draw 0 refused; draws 1 and 2 fill both slots; q2 beats q1.
        assert_eq!(chain.answers[0].text, "draw 2 [[q2]]");
    }

    #[test]
    fn best_of_n_with_every_draw_refused_fails_as_refusal() {
        let settings = LoopSettings {
            best_of_n: 3,
            max_resamples: 2,
            ..LoopSettings::default()
        };
        let refiner = RefuseThenSample {
            refusals: 100,
            seen: AtomicUsize::new(0),
        };
        let engine = engine_with(gateway(refiner), gateway(MarkerQualityJudge), settings);
        let err = engine.run_best_of_n(&record("r1", "Q?", None)).unwrap_err();
        assert_eq!(err.class(), "refusal");
    }

    #[test]
    fn single_prompt_selector_uses_one_judge_call() {
        let samples = SequenceBackend::new(
            CallTag::ZeroShot,
            vec!["alpha".into(), "bravo".into(), "charlie".into()],
        );
        let judge = ScriptedBackend::always(CallTag::Judge, "The best is answer 2.");
        let settings = LoopSettings {
            best_of_n: 3,
            best_of_selector: BestOfSelector::SinglePrompt,
            ..LoopSettings::default()
        };
        let engine = engine_with(gateway(samples), gateway(judge), settings);
        let chain = engine.run_best_of_n(&record("r1", "Q?", None)).unwrap();
        assert_eq!(chain.answers[0].text, "bravo");
        assert_eq!(engine.usage_report().calls(CallTag::Judge), 1);
    }

    #[test]
    fn single_prompt_selector_falls_back_to_first_on_nonsense() {
        let samples = SequenceBackend::new(CallTag::ZeroShot, vec!["alpha".into(), "bravo".into()]);
        let judge = ScriptedBackend::always(CallTag::Judge, "answer 9 of course");
        let settings = LoopSettings {
            best_of_n: 2,
            best_of_selector: BestOfSelector::SinglePrompt,
            ..LoopSettings::default()
        };
        let engine = engine_with(gateway(samples), gateway(judge), settings);
        let chain = engine.run_best_of_n(&record("r1", "Q?", None)).unwrap();
        assert_eq!(chain.answers[0].text, "alpha");
    }

    #[test]
    fn choice_index_parses_last_in_range_integer() {
        assert_eq!(parse_choice_index("2", 4), Some(1));
        assert_eq!(parse_choice_index("Answer 3 is best", 4), Some(2));
        assert_eq!(parse_choice_index("between 1 and 4, I pick 4", 4), Some(3));
        assert_eq!(parse_choice_index("9", 4), None);
        assert_eq!(parse_choice_index("none of them", 4), None);
        assert_eq!(parse_choice_index("score 100", 4), None);
    }

    #[test]
    fn seed_answers_are_trimmed_and_counted() {
        let engine = engine(rise_then_fall_refiner(), MarkerQualityJudge);
        let chain = engine
            .run_chain(&record("r1", "Q?", Some("  seed answer [[q3]]\n")))
            .unwrap();
        assert_eq!(chain.answers[0].text, "seed answer [[q3]]");
        assert_eq!(chain.answers[0].token_count, 3);
        assert_eq!(chain.answers[0].origin, AnswerOrigin::Seed);
    }
}
