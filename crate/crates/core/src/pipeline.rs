//! Batch orchestration: walks an input file through the engine with a
//! bounded worker pool, appends results to a crash-safe store, and knows
//! how to resume, analyze, and export what it produced.
//!
//! Workers claim records in input order but finish in any order; results
//! pass through a reorder buffer and are written strictly in input order.
//! The store bytes are therefore identical at any parallelism setting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::Serialize;

use crate::analytics::{
    build_win_matrix, chain_length_histogram, consistency_csv, consistency_experiment,
    histogram_csv, histogram_gnuplot, length_robustness, score_robustness, ConsistencyOptions,
    ConsistencyReport, RobustnessReport, WinMatrix, WinMatrixOptions,
};
use crate::backend::Gateway;
use crate::chain::{PreferenceChain, QueryRecord};
use crate::config::{ConfigError, RunConfig};
use crate::engine::{Engine, EngineError};
use crate::judge::JudgeError;
use crate::prompt::{
    default_criteria, render_feedback, render_grade, render_judge, render_refine, PromptError,
    TemplateSet,
};
use crate::store::{
    derive_run_id, export_sft, load_chains, load_records, ChainStore, InputIssue, RunManifest,
    RunMode, StoreError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("input {path} holds no usable records")]
    EmptyInput { path: PathBuf },
    #[error(
        "cannot resume: manifest has {in_manifest} for {what}, this run asked for {requested}"
    )]
    ResumeMismatch {
        what: &'static str,
        in_manifest: String,
        requested: String,
    },
}

/// What to run and where; knobs that are not part of the config file.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: RunMode,
    pub input: PathBuf,
    pub out: PathBuf,
    /// Continue an existing store instead of creating one.
    pub resume: bool,
    /// Forget previous failures so their records are attempted again.
    pub retry_failed: bool,
    /// Cooperative stop: set true (e.g. from a signal handler) and the
    /// pool stops claiming records, drains in-flight work, and saves.
    pub stop: Option<Arc<AtomicBool>>,
}

impl RunOptions {
    pub fn new(mode: RunMode, input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunOptions {
            mode,
            input: input.into(),
            out: out.into(),
            resume: false,
            retry_failed: false,
            stop: None,
        }
    }
}

/// What one `run` call did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: RunMode,
    /// Records processed this call (chains plus fresh failures).
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// Records skipped because a previous call already stored their chain.
    pub skipped_completed: usize,
    /// Records skipped because a previous call recorded their failure.
    pub skipped_failed: usize,
    /// Input lines that parsed badly and were never records at all.
    pub input_issues: Vec<InputIssue>,
    /// True when every pending record was processed (even if some failed).
    pub finished: bool,
    pub stopped_early: bool,
}

/// Runs (or resumes) one curation or baseline pass over an input file.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunSummary, PipelineError> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(ConfigError::Invalid { problems }.into());
    }

    let loaded = load_records(&options.input)?;
    if loaded.records.is_empty() {
        return Err(PipelineError::EmptyInput {
            path: options.input.clone(),
        });
    }
    let templates = match &config.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let backends = config.build_backends()?;
    let engine = Engine::new(
        backends.refiner,
        backends.judges,
        templates.clone(),
        default_criteria(),
        config.loop_settings.clone(),
    );

    let mut store = if options.resume {
        let store = ChainStore::resume(&options.out)?;
        let manifest = store.manifest();
        if manifest.input_digest != loaded.digest {
            return Err(StoreError::InputChanged {
                expected: manifest.input_digest.clone(),
                found: loaded.digest,
            }
            .into());
        }
        if manifest.mode != options.mode {
            return Err(StoreError::ModeMismatch {
                store: manifest.mode,
                append: options.mode,
            }
            .into());
        }
        if manifest.seed != config.seed {
            return Err(PipelineError::ResumeMismatch {
                what: "seed",
                in_manifest: manifest.seed.to_string(),
                requested: config.seed.to_string(),
            });
        }
        store
    } else {
        let run_id = derive_run_id(&loaded.digest, config.seed, options.mode);
        let manifest = RunManifest::new(
            run_id,
            options.mode,
            config.seed,
            config.loop_settings.max_refinements,
            loaded.digest.clone(),
            templates.versions(),
            config.manifest_value(),
        );
        ChainStore::create(&options.out, manifest)?
    };
    if options.retry_failed {
        store.clear_failures()?;
    }

    let done: BTreeSet<String> = store.completed().clone();
    let known_failed: BTreeSet<String> = store.manifest().failed.keys().cloned().collect();
    let mut skipped_completed = 0usize;
    let mut skipped_failed = 0usize;
    let pending: Vec<&QueryRecord> = loaded
        .records
        .iter()
        .filter(|r| {
            if done.contains(&r.id) {
                skipped_completed += 1;
                false
            } else if known_failed.contains(&r.id) {
                skipped_failed += 1;
                false
            } else {
                true
            }
        })
        .collect();

    let stop = options
        .stop
        .clone()
        .unwrap_or_else(|| Arc::new(AtomicBool::new(false)));
    let workers = config.parallelism.max(1).min(pending.len().max(1));
    let n_steps = config.loop_settings.max_refinements;
    let mode = options.mode;

    let mut succeeded = 0usize;
    let mut failed = 0usize;
    ordered_map(
        &pending,
        workers,
        &stop,
        |record| match mode {
            RunMode::Curate => engine.run_chain(record),
            RunMode::RefinerOnly => engine.run_refiner_only(record, n_steps),
            RunMode::BestOfN => engine.run_best_of_n(record),
        },
        |record, result: Result<PreferenceChain, EngineError>| {
            match result {
                Ok(chain) => {
                    store.append(chain)?;
                    succeeded += 1;
                }
                Err(error) => {
                    store.record_failure(&record.id, error.class(), &error.to_string())?;
                    failed += 1;
                }
            }
            Ok(())
        },
    )?;

    // Usage accumulates across resumed segments; a segment only knows its
    // own calls, the manifest carries the running total.
    let mut usage = store.manifest().usage.clone().unwrap_or_default();
    usage.absorb(&engine.usage_report());
    let attempted = succeeded + failed;
    let finished = attempted == pending.len();
    if finished {
        store.finish(usage)?;
    } else {
        store.record_usage(usage)?;
    }

    Ok(RunSummary {
        run_id: store.manifest().run_id.clone(),
        mode,
        attempted,
        succeeded,
        failed,
        skipped_completed,
        skipped_failed,
        input_issues: loaded.issues,
        finished,
        stopped_early: !finished,
    })
}

/// Runs `job` over `items` on `workers` threads and hands results to
/// `emit` strictly in input order. Stops claiming new items once `stop`
/// turns true (in-flight items still finish); an `emit` error also stops
/// the pool and is returned.
fn ordered_map<'a, T: Sync, R: Send>(
    items: &[&'a T],
    workers: usize,
    stop: &AtomicBool,
    job: impl Fn(&'a T) -> R + Sync,
    mut emit: impl FnMut(&'a T, R) -> Result<(), StoreError>,
) -> Result<(), StoreError> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            let tx = tx.clone();
            let next = &next;
            let job = &job;
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let result = job(items[index]);
                if tx.send((index, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Reorder buffer: hold out-of-order results until the next input
        // index arrives, then flush the contiguous prefix.
        let mut buffer: BTreeMap<usize, R> = BTreeMap::new();
        let mut next_to_emit = 0usize;
        let mut first_error = None;
        for (index, result) in rx {
            if first_error.is_some() {
                continue; // drain so workers never block on send
            }
            buffer.insert(index, result);
            while let Some(result) = buffer.remove(&next_to_emit) {
                if let Err(error) = emit(items[next_to_emit], result) {
                    first_error = Some(error);
                    stop.store(true, Ordering::SeqCst);
                    break;
                }
                next_to_emit += 1;
            }
        }
        match first_error {
            Some(error) => Err(error),
            None => Ok(()),
        }
    })
}

/// Renders every prompt the configured run would send for the first input
/// record, without touching any backend. Placeholder text stands in for
/// completions that would come from the model.
pub fn dry_run(config: &RunConfig, input: &Path) -> Result<String, PipelineError> {
    let loaded = load_records(input)?;
    let record = loaded
        .records
        .first()
        .ok_or_else(|| PipelineError::EmptyInput {
            path: input.to_path_buf(),
        })?;
    let templates = match &config.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let criteria = default_criteria();
    let first_answer = record
        .initial_answer
        .clone()
        .unwrap_or_else(|| "<zero-shot answer pending>".to_string());

    let feedback = render_feedback(&templates.feedback, &record.query, &first_answer, &criteria)?;
    let refine = render_refine(
        &templates.refine,
        &record.query,
        &first_answer,
        "<feedback pending>",
    )?;
    let judge = render_judge(
        &templates.judge,
        &record.query,
        &first_answer,
        "<candidate refinement>",
        &criteria,
    )?;
    let grade = render_grade(&templates.grade, &record.query, &first_answer, &criteria)?;

    let mut out = String::new();
    out.push_str(&format!("record: {}\n", record.id));
    for (kind, version) in templates.versions() {
        out.push_str(&format!("template {kind}: {version}\n"));
    }
    for (name, prompt) in [
        ("feedback", feedback),
        ("refine", refine),
        ("judge", judge),
        ("grade", grade),
    ] {
        out.push_str(&format!("\n=== {name} prompt ===\n{prompt}\n"));
    }
    Ok(out)
}

/// Knobs for the judged analysis experiments.
#[derive(Debug, Clone, Copy)]
pub struct AnalyzeOptions {
    /// Chain positions compared in the win matrix.
    pub depth: usize,
    pub trials_per_cell: usize,
    /// Replays per pair in the consistency experiment.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            depth: 6,
            trials_per_cell: 200,
            repeats: 10,
            seed: 0,
        }
    }
}

/// Everything `analyze` measured. Judged sections are present only when a
/// judge was supplied, labeled robustness only when labels exist.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub chains: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub length: RobustnessReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<RobustnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<RobustnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_matrix: Option<WinMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyReport>,
}

/// Gold labels from record metadata, keyed by record id.
pub fn gold_labels(records: &[QueryRecord]) -> BTreeMap<String, String> {
    records
        .iter()
        .filter_map(|r| r.metadata.get("gold").map(|g| (r.id.clone(), g.clone())))
        .collect()
}

/// Measures a finished store. With a judge gateway the report includes the
/// win matrix, the consistency replay, and grader-scored robustness; the
/// histogram and length robustness never need one. When `report_dir` is
/// given, JSON, CSV, and gnuplot files are written there.
pub fn analyze(
    store_dir: &Path,
    judge: Option<(&Gateway, &TemplateSet)>,
    gold: &BTreeMap<String, String>,
    options: &AnalyzeOptions,
    report_dir: Option<&Path>,
) -> Result<AnalysisReport, PipelineError> {
    let chains = load_chains(store_dir)?;
    let criteria = default_criteria();
    let histogram = chain_length_histogram(&chains);
    let length = length_robustness(&chains);
    let accuracy = (!gold.is_empty()).then(|| crate::analytics::accuracy_robustness(&chains, gold));

    let (win_matrix, consistency, judge_score) = match judge {
        Some((gateway, templates)) => {
            let matrix = build_win_matrix(
                &chains,
                gateway,
                &templates.judge,
                &criteria,
                WinMatrixOptions {
                    depth: options.depth,
                    trials_per_cell: options.trials_per_cell,
                    seed: options.seed,
                },
            )?;
            let report = consistency_experiment(
                &chains,
                gateway,
                &templates.judge,
                &criteria,
                ConsistencyOptions {
                    repeats: options.repeats,
                    seed: options.seed,
                },
            )?;
            let score = score_robustness(&chains, gateway, &templates.grade, &criteria)?;
            (Some(matrix), Some(report), Some(score))
        }
        None => (None, None, None),
    };

    let report = AnalysisReport {
        chains: chains.len(),
        histogram,
        length,
        accuracy,
        judge_score,
        win_matrix,
        consistency,
    };

    if let Some(dir) = report_dir {
        write_report_files(dir, &report)?;
    }
    Ok(report)
}

fn write_report_files(dir: &Path, report: &AnalysisReport) -> Result<(), PipelineError> {
    let io = |source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let write = |name: &str, text: String| -> Result<(), PipelineError> {
        std::fs::write(dir.join(name), text).map_err(|source| {
            StoreError::Io {
                path: dir.join(name),
                source,
            }
            .into()
        })
    };
    let json = serde_json::to_string_pretty(report).map_err(|source| StoreError::Json {
        path: dir.join("report.json"),
        source,
    })?;
    write("report.json", json + "\n")?;
    write("histogram.csv", histogram_csv(&report.histogram))?;
    write(
        "histogram.gnuplot",
        histogram_gnuplot("histogram.csv", "histogram.png"),
    )?;
    if let Some(matrix) = &report.win_matrix {
        write("win_matrix.csv", matrix.to_csv())?;
    }
    if let Some(consistency) = &report.consistency {
        write("consistency.csv", consistency_csv(consistency))?;
    }
    Ok(())
}

/// Exports a store's chains as prompt/completion pairs; returns how many.
pub fn export(store_dir: &Path, out: &Path) -> Result<usize, PipelineError> {
    let chains = load_chains(store_dir)?;
    Ok(export_sft(&chains, out)?)
}
