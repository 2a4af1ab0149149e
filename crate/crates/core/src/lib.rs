//! Curates preference-ordered answer chains with a language-model backend.
//!
//! The pipeline starts from a query and an initial answer, asks a refiner
//! model for feedback and a revised answer, and keeps the revision only when
//! a position-debiased pairwise judge prefers it in both answer orderings.
//! Accepted revisions form a [`chain::PreferenceChain`]; the final accepted
//! answer of each chain can be exported as a supervised fine-tuning pair.
//!
//! Module map:
//!
//! - [`chain`] — domain types (queries, answers, verdicts, chains) and
//!   well-formedness validation.
//! - [`backend`] — chat-completion gateway over HTTP providers and
//!   deterministic scripted/simulated backends, with retry, rate limiting,
//!   and per-tag usage accounting.
//! - [`prompt`] — the feedback / refine / judge / grade prompt templates and
//!   the criteria set that parameterizes them.
//! - [`judge`] — one position-debiased pairwise judgment: two swapped judge
//!   calls per voter, verdict parsing, optional length penalty.
//! - [`engine`] — the refine-then-judge loop plus the refiner-only and
//!   best-of-n baseline modes.
//! - [`store`] — JSONL record ingestion, durable chain persistence with a
//!   resumable manifest, and SFT export.
//! - [`analytics`] — win matrices, chain-length histograms, judge
//!   self-consistency, and robustness deltas.
//! - [`config`] / [`pipeline`] — run configuration and the batch
//!   orchestration used by the CLI.

pub mod analytics;
pub mod backend;
pub mod chain;
pub mod config;
pub mod engine;
pub mod judge;
pub mod pipeline;
pub mod prompt;
pub mod store;
