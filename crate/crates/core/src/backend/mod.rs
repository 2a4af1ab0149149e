//! Backend abstraction: every model call goes through a [`Gateway`], which
//! wraps a [`Backend`] provider with retry, rate limiting, and per-tag usage
//! accounting. Providers: [`http::HttpBackend`] for real endpoints,
//! [`script::ScriptedBackend`] for canned transcripts, and the judges in
//! [`sim`] for deterministic experiments.

pub mod http;
pub mod script;
pub mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// What role a call plays in the pipeline; usage is accounted per tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallTag {
    ZeroShot,
    Feedback,
    Refine,
    Judge,
    Grade,
}

impl CallTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            CallTag::ZeroShot => "zero_shot",
            CallTag::Feedback => "feedback",
            CallTag::Refine => "refine",
            CallTag::Judge => "judge",
            CallTag::Grade => "grade",
        }
    }
}

impl fmt::Display for CallTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One rendered prompt ready to send.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRequest {
    pub tag: CallTag,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl CallRequest {
    pub fn new(tag: CallTag, user: impl Into<String>, temperature: f64) -> Self {
        CallRequest {
            tag,
            user: user.into(),
            temperature,
            max_tokens: None,
        }
    }
}

/// A completed model call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Provider-level failure classes; the gateway decides what to do with each.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: rate limits, 5xx, timeouts, connection drops.
    #[error("transient backend failure{}: {message}", status_suffix(.status))]
    Transient {
        status: Option<u16>,
        message: String,
    },
    /// The model declined to answer; retrying will not help.
    #[error("backend refused the request: {message}")]
    Refusal { message: String },
    /// Misconfiguration or a protocol error; retrying will not help.
    #[error("fatal backend failure: {message}")]
    Fatal { message: String },
}

fn status_suffix(status: &Option<u16>) -> String {
    match status {
        Some(code) => format!(" (status {code})"),
        None => String::new(),
    }
}

/// A synchronous model provider. Implementations must be shareable across
/// worker threads.
pub trait Backend: Send + Sync {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError>;
    /// Stable provider label used in logs and manifests.
    fn name(&self) -> &str;
}

/// What the gateway reports after retries are spent.
#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend call failed after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: BackendError,
    },
    #[error("backend refused the request: {message}")]
    Refusal { message: String },
    #[error("fatal backend failure: {message}")]
    Fatal { message: String },
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt; total attempts = `max_retries + 1`.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Jitter fraction: each delay is scaled by a factor in `[1-j, 1+j]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// A policy that retries `max_retries` times with no waiting, for tests.
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: 0.0,
        }
    }

    /// Backoff before retry number `retry` (1-based): base doubled per step,
    /// capped, then jittered.
    pub fn delay_for(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let doubled = self.base_delay.saturating_mul(
            1u32.checked_shl(retry.saturating_sub(1))
                .unwrap_or(u32::MAX),
        );
        let capped = doubled.min(self.max_delay);
        if self.jitter <= 0.0 || capped.is_zero() {
            return capped;
        }
        let factor = rng.gen_range(1.0 - self.jitter..=1.0 + self.jitter);
        capped.mul_f64(factor.max(0.0))
    }
}

/// Token-bucket limiter over a caller-supplied clock, so tests can drive it
/// with synthetic instants.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    tokens: f64,
    refill_per_sec: f64,
    last_refill: Instant,
}

impl RateLimiter {
    /// A full bucket holding one minute of requests.
    pub fn new(requests_per_minute: u32, now: Instant) -> Self {
        let capacity = f64::from(requests_per_minute.max(1));
        RateLimiter {
            capacity,
            tokens: capacity,
            refill_per_sec: capacity / 60.0,
            last_refill: now,
        }
    }

    /// Takes one token, or says how long until one is available.
    pub fn try_acquire(&mut self, now: Instant) -> Result<(), Duration> {
        let elapsed = now.saturating_duration_since(self.last_refill);
        self.tokens =
            (self.tokens + elapsed.as_secs_f64() * self.refill_per_sec).min(self.capacity);
        self.last_refill = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            let deficit = 1.0 - self.tokens;
            Err(Duration::from_secs_f64(deficit / self.refill_per_sec))
        }
    }
}

/// Per-tag call accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagUsage {
    /// Calls that returned a response.
    pub calls: u64,
    /// Calls that ended in refusal or exhaustion.
    pub failed_calls: u64,
    /// Transient re-attempts beyond each call's first try.
    pub retries: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Usage keyed by tag name, in stable order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport(pub BTreeMap<String, TagUsage>);

impl UsageReport {
    /// Successful calls under one tag.
    pub fn calls(&self, tag: CallTag) -> u64 {
        self.0.get(tag.as_str()).map_or(0, |u| u.calls)
    }

    pub fn retries(&self, tag: CallTag) -> u64 {
        self.0.get(tag.as_str()).map_or(0, |u| u.retries)
    }

    /// Sums counters across tags.
    pub fn total(&self) -> TagUsage {
        let mut total = TagUsage::default();
        for usage in self.0.values() {
            total.calls += usage.calls;
            total.failed_calls += usage.failed_calls;
            total.retries += usage.retries;
            total.prompt_tokens += usage.prompt_tokens;
            total.completion_tokens += usage.completion_tokens;
        }
        total
    }

    /// Adds another report into this one.
    pub fn absorb(&mut self, other: &UsageReport) {
        for (tag, usage) in &other.0 {
            let entry = self.0.entry(tag.clone()).or_default();
            entry.calls += usage.calls;
            entry.failed_calls += usage.failed_calls;
            entry.retries += usage.retries;
            entry.prompt_tokens += usage.prompt_tokens;
            entry.completion_tokens += usage.completion_tokens;
        }
    }
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

/// Wraps a provider with retry, rate limiting, and usage accounting. All
/// pipeline calls go through here; nothing else talks to a [`Backend`].
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limiter: Option<Mutex<RateLimiter>>,
    usage: Mutex<BTreeMap<String, TagUsage>>,
    sleeper: Box<Sleeper>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn Backend>,
        retry: RetryPolicy,
        requests_per_minute: Option<u32>,
    ) -> Self {
        Gateway {
            backend,
            retry,
            limiter: requests_per_minute
                .map(|rpm| Mutex::new(RateLimiter::new(rpm, Instant::now()))),
            usage: Mutex::new(BTreeMap::new()),
            sleeper: Box::new(|d| std::thread::sleep(d)),
        }
    }

    /// Replaces the waiting strategy; tests install a no-op.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Box::new(sleeper);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Issues one logical call: waits for rate-limit room, retries transient
    /// failures with backoff, and records usage under the request's tag.
    pub fn call(&self, request: &CallRequest) -> Result<CallResponse, GatewayError> {
        let mut retries_used = 0u64;
        let mut attempts = 0u32;
        loop {
            self.wait_for_slot();
            attempts += 1;
            match self.backend.call(request) {
                Ok(response) => {
                    let mut usage = self.usage.lock().unwrap();
                    let entry = usage.entry(request.tag.to_string()).or_default();
                    entry.calls += 1;
                    entry.retries += retries_used;
                    entry.prompt_tokens += response.prompt_tokens;
                    entry.completion_tokens += response.completion_tokens;
                    return Ok(response);
                }
                Err(BackendError::Transient { status, message }) => {
                    if attempts > self.retry.max_retries {
                        self.record_failure(request.tag, retries_used);
                        return Err(GatewayError::Exhausted {
                            attempts,
                            last: BackendError::Transient { status, message },
                        });
                    }
                    retries_used += 1;
                    let delay = self.retry.delay_for(attempts, &mut rand::thread_rng());
                    if !delay.is_zero() {
                        (self.sleeper)(delay);
                    }
                }
                Err(BackendError::Refusal { message }) => {
                    self.record_failure(request.tag, retries_used);
                    return Err(GatewayError::Refusal { message });
                }
                Err(BackendError::Fatal { message }) => {
                    self.record_failure(request.tag, retries_used);
                    return Err(GatewayError::Fatal { message });
                }
            }
        }
    }

    fn wait_for_slot(&self) {
        let Some(limiter) = &self.limiter else { return };
        loop {
            let wait = limiter.lock().unwrap().try_acquire(Instant::now());
            match wait {
                Ok(()) => return,
                Err(duration) => (self.sleeper)(duration),
            }
        }
    }

    fn record_failure(&self, tag: CallTag, retries_used: u64) {
        let mut usage = self.usage.lock().unwrap();
        let entry = usage.entry(tag.to_string()).or_default();
        entry.failed_calls += 1;
        entry.retries += retries_used;
    }

    /// Snapshot of usage so far.
    pub fn usage_report(&self) -> UsageReport {
        UsageReport(self.usage.lock().unwrap().clone())
    }
}

/// Whitespace-token estimate used by offline providers that have no real
/// tokenizer.
pub(crate) fn estimated_tokens(text: &str) -> u64 {
    crate::chain::canonical_token_count(text) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Fails with a transient error a set number of times, then succeeds.
    struct FlakyBackend {
        failures: u32,
        seen: AtomicU32,
    }

    impl Backend for FlakyBackend {
        fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transient {
                    status: Some(429),
                    message: "slow down".into(),
                })
            } else {
                Ok(CallResponse {
                    text: "ok".into(),
                    prompt_tokens: estimated_tokens(&request.user),
                    completion_tokens: 1,
                })
            }
        }

        fn name(&self) -> &str {
            "flaky"
        }
    }

    fn request() -> CallRequest {
        CallRequest::new(CallTag::Refine, "improve this text", 0.7)
    }

    #[test]
    fn retries_transient_failures_until_success() {
        let backend = Arc::new(FlakyBackend {
            failures: 2,
            seen: AtomicU32::new(0),
        });
        let gateway =
            Gateway::new(backend.clone(), RetryPolicy::immediate(5), None).with_sleeper(|_| {});
        let response = gateway.call(&request()).unwrap();
        assert_eq!(response.text, "ok");
        assert_eq!(backend.seen.load(Ordering::SeqCst), 3);
        let report = gateway.usage_report();
        assert_eq!(report.calls(CallTag::Refine), 1);
        assert_eq!(report.retries(CallTag::Refine), 2);
    }

    #[test]
    fn exhausts_after_retry_limit() {
        let backend = Arc::new(FlakyBackend {
            failures: 100,
            seen: AtomicU32::new(0),
        });
        let gateway =
            Gateway::new(backend.clone(), RetryPolicy::immediate(3), None).with_sleeper(|_| {});
        let err = gateway.call(&request()).unwrap_err();
        match err {
            GatewayError::Exhausted { attempts, .. } => assert_eq!(attempts, 4),
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(backend.seen.load(Ordering::SeqCst), 4);
        let report = gateway.usage_report();
        assert_eq!(report.calls(CallTag::Refine), 0);
        assert_eq!(report.0["refine"].failed_calls, 1);
        assert_eq!(report.retries(CallTag::Refine), 3);
    }

    struct RefusingBackend;

    impl Backend for RefusingBackend {
        fn call(&self, _request: &CallRequest) -> Result<CallResponse, BackendError> {
            Err(BackendError::Refusal {
                message: "cannot help with that".into(),
            })
        }

        fn name(&self) -> &str {
            "refuser"
        }
    }

    #[test]
    fn refusal_is_not_retried() {
        let gateway = Gateway::new(Arc::new(RefusingBackend), RetryPolicy::immediate(5), None)
            .with_sleeper(|_| {});
        let err = gateway.call(&request()).unwrap_err();
        assert!(matches!(err, GatewayError::Refusal { .. }));
        let report = gateway.usage_report();
        assert_eq!(report.retries(CallTag::Refine), 0);
        assert_eq!(report.0["refine"].failed_calls, 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_retries: 10,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
            jitter: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let delays: Vec<u64> = (1..=8)
            .map(|r| policy.delay_for(r, &mut rng).as_secs())
            .collect();
        assert_eq!(delays, vec![1, 2, 4, 8, 16, 32, 60, 60]);
    }

    #[test]
    fn backoff_jitter_stays_in_band() {
        let policy = RetryPolicy {
            max_retries: 10,
            base_delay: Duration::from_secs(4),
            max_delay: Duration::from_secs(60),
            jitter: 0.25,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let d = policy.delay_for(1, &mut rng).as_secs_f64();
            assert!((3.0..=5.0).contains(&d), "delay {d} outside [3, 5]");
        }
    }

    #[test]
    fn rate_limiter_enforces_rate_with_mock_clock() {
        let start = Instant::now();
        let mut limiter = RateLimiter::new(60, start);
        for _ in 0..60 {
            limiter.try_acquire(start).unwrap();
        }
        let wait = limiter.try_acquire(start).unwrap_err();
        assert!((0.99..=1.01).contains(&wait.as_secs_f64()), "wait {wait:?}");
        // One second later one token has refilled — a single acquire fits.
        let later = start + Duration::from_secs(1);
        limiter.try_acquire(later).unwrap();
        assert!(limiter.try_acquire(later).is_err());
    }

    #[test]
    fn rate_limiter_does_not_accumulate_beyond_capacity() {
        let start = Instant::now();
        let mut limiter = RateLimiter::new(6, start);
        // A long idle period must not grant more than one bucket.
        let later = start + Duration::from_secs(3600);
        for _ in 0..6 {
            limiter.try_acquire(later).unwrap();
        }
        assert!(limiter.try_acquire(later).is_err());
    }

    #[test]
    fn usage_reports_merge() {
        let mut a = UsageReport::default();
        a.0.insert(
            "judge".into(),
            TagUsage {
                calls: 2,
                failed_calls: 0,
                retries: 1,
                prompt_tokens: 10,
                completion_tokens: 4,
            },
        );
        let mut b = UsageReport::default();
        b.0.insert(
            "judge".into(),
            TagUsage {
                calls: 3,
                failed_calls: 1,
                retries: 0,
                prompt_tokens: 7,
                completion_tokens: 2,
            },
        );
        b.0.insert(
            "refine".into(),
            TagUsage {
                calls: 1,
                ..Default::default()
            },
        );
        a.absorb(&b);
        assert_eq!(a.calls(CallTag::Judge), 5);
        assert_eq!(a.calls(CallTag::Refine), 1);
        assert_eq!(a.total().calls, 6);
        assert_eq!(a.total().prompt_tokens, 17);
    }
}
