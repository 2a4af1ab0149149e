//! Deterministic judge and grader providers for experiments and tests.
//!
//! These providers never touch the network. They key on `[[qN]]` quality
//! markers embedded in answer text and on the `Answer A:` / `Answer B:`
//! labels of the rendered judge prompt, so a test can stage answers of known
//! relative quality and get perfectly reproducible judgments.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{estimated_tokens, Backend, BackendError, CallRequest, CallResponse, CallTag};

/// Reads the last `[[qN]]` marker in `text`.
pub fn quality_marker(text: &str) -> Option<i64> {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    let re = MARKER.get_or_init(|| Regex::new(r"\[\[q(-?\d+)\]\]").unwrap());
    re.captures_iter(text)
        .last()
        .and_then(|c| c[1].parse().ok())
}

/// Splits a rendered judge prompt into its two answer segments.
pub fn split_judge_prompt(user: &str) -> Option<(&str, &str)> {
    let a_label = user.find("Answer A:")?;
    let a_start = a_label + "Answer A:".len();
    let b_label = a_start + user[a_start..].find("Answer B:")?;
    let b_start = b_label + "Answer B:".len();
    let b_end = user[b_start..]
        .find("Criteria:")
        .map(|i| b_start + i)
        .unwrap_or(user.len());
    Some((user[a_start..b_label].trim(), user[b_start..b_end].trim()))
}

/// The answer segment of a rendered grade prompt.
fn split_grade_prompt(user: &str) -> Option<&str> {
    let label = user.find("\nAnswer:")?;
    let start = label + "\nAnswer:".len();
    let end = user[start..]
        .find("Criteria:")
        .map(|i| start + i)
        .unwrap_or(user.len());
    Some(user[start..end].trim())
}

fn verdict_response(user: &str, preferred: char, rationale: &str) -> CallResponse {
    let text = format!("{rationale}\nPreferred: {preferred}");
    CallResponse {
        prompt_tokens: estimated_tokens(user),
        completion_tokens: estimated_tokens(&text),
        text,
    }
}

fn expect_judge(request: &CallRequest) -> Result<(&str, &str), BackendError> {
    if request.tag != CallTag::Judge {
        return Err(BackendError::Fatal {
            message: format!("simulated judge received a {} call", request.tag),
        });
    }
    split_judge_prompt(&request.user).ok_or_else(|| BackendError::Fatal {
        message: "judge prompt lacks Answer A/Answer B labels".to_string(),
    })
}

/// Prefers the answer with the higher `[[qN]]` marker; equal marks are a
/// tie. Answers without a marker count as quality 0.
#[derive(Debug, Default, Clone)]
pub struct MarkerQualityJudge;

impl Backend for MarkerQualityJudge {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        let (a, b) = expect_judge(request)?;
        let qa = quality_marker(a).unwrap_or(0);
        let qb = quality_marker(b).unwrap_or(0);
        let rationale = format!("quality markers {qa} vs {qb}.");
        let preferred = match qa.cmp(&qb) {
            std::cmp::Ordering::Greater => 'A',
            std::cmp::Ordering::Less => 'B',
            std::cmp::Ordering::Equal => {
                let text = format!("{rationale}\nPreferred: tie");
                return Ok(CallResponse {
                    prompt_tokens: estimated_tokens(&request.user),
                    completion_tokens: estimated_tokens(&text),
                    text,
                });
            }
        };
        Ok(verdict_response(&request.user, preferred, &rationale))
    }

    fn name(&self) -> &str {
        "sim:marker-quality-judge"
    }
}

/// Ignores content entirely and flips a seeded coin for every call.
#[derive(Debug)]
pub struct CoinFlipJudge {
    rng: Mutex<ChaCha8Rng>,
}

impl CoinFlipJudge {
    pub fn seeded(seed: u64) -> Self {
        CoinFlipJudge {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Backend for CoinFlipJudge {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        expect_judge(request)?;
        let heads = self.rng.lock().unwrap().gen_bool(0.5);
        let preferred = if heads { 'A' } else { 'B' };
        Ok(verdict_response(&request.user, preferred, "coin flip."))
    }

    fn name(&self) -> &str {
        "sim:coin-flip-judge"
    }
}

/// Prefers whichever answer contains a fixed token; tie when both or
/// neither do.
#[derive(Debug, Clone)]
pub struct ContentTokenJudge {
    pub token: String,
}

impl ContentTokenJudge {
    pub fn new(token: impl Into<String>) -> Self {
        ContentTokenJudge {
            token: token.into(),
        }
    }
}

impl Backend for ContentTokenJudge {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        let (a, b) = expect_judge(request)?;
        let in_a = a.contains(&self.token);
        let in_b = b.contains(&self.token);
        let rationale = format!("looking for {:?}.", self.token);
        let preferred = match (in_a, in_b) {
            (true, false) => 'A',
            (false, true) => 'B',
            _ => {
                let text = format!("{rationale}\nPreferred: tie");
                return Ok(CallResponse {
                    prompt_tokens: estimated_tokens(&request.user),
                    completion_tokens: estimated_tokens(&text),
                    text,
                });
            }
        };
        Ok(verdict_response(&request.user, preferred, &rationale))
    }

    fn name(&self) -> &str {
        "sim:content-token-judge"
    }
}

/// Honest only when the quality gap is wide: below `threshold` it always
/// prefers position A, modeling a position-biased judge.
#[derive(Debug, Clone)]
pub struct GapSensitiveJudge {
    pub threshold: i64,
}

impl Backend for GapSensitiveJudge {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        let (a, b) = expect_judge(request)?;
        let qa = quality_marker(a).unwrap_or(0);
        let qb = quality_marker(b).unwrap_or(0);
        let rationale = format!(
            "quality markers {qa} vs {qb}, threshold {}.",
            self.threshold
        );
        let preferred = if (qa - qb).abs() >= self.threshold {
            if qa > qb {
                'A'
            } else {
                'B'
            }
        } else {
            'A'
        };
        Ok(verdict_response(&request.user, preferred, &rationale))
    }

    fn name(&self) -> &str {
        "sim:gap-sensitive-judge"
    }
}

/// Grades an answer as ten times its quality marker, clamped to 0-100.
#[derive(Debug, Default, Clone)]
pub struct MarkerGrader;

impl Backend for MarkerGrader {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        if request.tag != CallTag::Grade {
            return Err(BackendError::Fatal {
                message: format!("simulated grader received a {} call", request.tag),
            });
        }
        let answer = split_grade_prompt(&request.user).ok_or_else(|| BackendError::Fatal {
            message: "grade prompt lacks an Answer label".to_string(),
        })?;
        let quality = quality_marker(answer).unwrap_or(0);
        let score = (quality * 10).clamp(0, 100);
        let text = format!("Score: {score}");
        Ok(CallResponse {
            prompt_tokens: estimated_tokens(&request.user),
            completion_tokens: estimated_tokens(&text),
            text,
        })
    }

    fn name(&self) -> &str {
        "sim:marker-grader"
    }
}

/// Hands out a fixed list of responses in order for one call tag, cycling
/// when the list runs out. Lets a test stage several distinct samples for
/// the same prompt, which a pure rule table cannot express.
#[derive(Debug)]
pub struct SequenceBackend {
    tag: CallTag,
    responses: Vec<String>,
    next: AtomicUsize,
}

impl SequenceBackend {
    pub fn new(tag: CallTag, responses: Vec<String>) -> Self {
        SequenceBackend {
            tag,
            responses,
            next: AtomicUsize::new(0),
        }
    }
}

impl Backend for SequenceBackend {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        if request.tag != self.tag {
            return Err(BackendError::Fatal {
                message: format!(
                    "sequence backend serves {} calls, received {}",
                    self.tag, request.tag
                ),
            });
        }
        if self.responses.is_empty() {
            return Err(BackendError::Fatal {
                message: "sequence backend has no responses".to_string(),
            });
        }
        let i = self.next.fetch_add(1, Ordering::SeqCst) % self.responses.len();
        let text = self.responses[i].clone();
        Ok(CallResponse {
            prompt_tokens: estimated_tokens(&request.user),
            completion_tokens: estimated_tokens(&text),
            text,
        })
    }

    fn name(&self) -> &str {
        "sim:sequence"
    }
}
