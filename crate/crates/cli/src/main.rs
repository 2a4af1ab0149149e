//! Command-line front end: curate preference chains, run baselines,
//! analyze finished stores, and export training pairs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use prefchain_core::backend::{CallTag, Gateway};
use prefchain_core::config::RunConfig;
use prefchain_core::pipeline::{self, AnalyzeOptions, RunOptions, RunSummary};
use prefchain_core::prompt::TemplateSet;
use prefchain_core::store::{load_records, RunManifest, RunMode, MANIFEST_FILE};

#[derive(Parser)]
#[command(
    name = "prefchain",
    version,
    about = "Curates preference-ordered answer chains by refining answers and keeping only judged improvements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the judged refinement loop over an input file.
    Curate(RunArgs),
    /// Run a baseline instead: plain rewrites or best-of-n sampling.
    Baseline(BaselineArgs),
    /// Measure a finished store: lengths, win rates, judge consistency,
    /// before/after robustness.
    Analyze(AnalyzeArgs),
    /// Export stored chains as prompt/completion training pairs.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL input, one record per line: {"id"?, "query", "answer"?, "metadata"?}.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory for the chain store and its manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; the stored bytes are the same at any setting.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Directory of prompt templates; built-ins are used when omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Cap on accepted refinements per chain.
    #[arg(long)]
    max_refinements: Option<usize>,
    /// Samples drawn by the best-of-n baseline.
    #[arg(long)]
    best_of_n: Option<usize>,
    /// Continue an existing store instead of creating a fresh one.
    #[arg(long)]
    resume: bool,
    /// Attempt previously failed records again (with --resume).
    #[arg(long)]
    retry_failed: bool,
    /// Render every prompt for the first record and exit without calling
    /// any backend or writing any store.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct BaselineArgs {
    /// Which baseline: refiner_only or best_of_n.
    #[arg(long, value_parser = parse_baseline_mode)]
    mode: Option<RunMode>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Store directory produced by curate or baseline.
    #[arg(long)]
    store: PathBuf,
    /// Config naming a judge backend; without one only the judge-free
    /// measurements run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Original input file, for gold labels in record metadata.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for report.json, CSVs, and the gnuplot script.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Chain positions compared in the win matrix.
    #[arg(long, default_value_t = 6)]
    depth: usize,
    /// Judgments per win-matrix cell.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Replays per pair in the consistency experiment.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Store directory produced by curate or baseline.
    #[arg(long)]
    store: PathBuf,
    /// Output JSONL file of prompt/completion pairs.
    #[arg(long)]
    out: PathBuf,
}

fn parse_baseline_mode(s: &str) -> Result<RunMode, String> {
    let mode: RunMode = s.parse()?;
    if mode == RunMode::Curate {
        return Err("baseline runs refiner_only or best_of_n; use the curate subcommand".into());
    }
    Ok(mode)
}

type CliError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            let mut source = error.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Curate(args) => run_command(RunMode::Curate, args),
        Command::Baseline(args) => {
            let config_mode = args
                .run
                .config
                .as_deref()
                .map(RunConfig::load)
                .transpose()?
                .and_then(|c| c.mode);
            let mode = args.mode.or(config_mode).ok_or(
                "baseline needs --mode refiner_only|best_of_n (or mode in the config file)",
            )?;
            if mode == RunMode::Curate {
                return Err("baseline cannot run curate; use the curate subcommand".into());
            }
            run_command(mode, args.run)
        }
        Command::Analyze(args) => analyze_command(args),
        Command::Export(args) => export_command(args),
    }
}

/// Config file merged with command-line overrides.
fn merged_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(parallelism) = args.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(input) = &args.input {
        config.input = Some(input.clone());
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    if let Some(templates) = &args.templates {
        config.templates = Some(templates.clone());
    }
    if let Some(n) = args.max_refinements {
        config.loop_settings.max_refinements = n;
    }
    if let Some(n) = args.best_of_n {
        config.loop_settings.best_of_n = n;
    }
    Ok(config)
}

fn run_command(mode: RunMode, args: RunArgs) -> Result<ExitCode, CliError> {
    let config = merged_config(&args)?;
    if let Some(configured) = config.mode {
        if configured != mode {
            return Err(format!(
                "the config file sets mode {configured} but this invocation runs {mode}; \
                 drop one of them"
            )
            .into());
        }
    }
    let input = config
        .input
        .clone()
        .ok_or("an input file is required: pass --input or set input in the config")?;
    let out = config
        .out
        .clone()
        .ok_or("an output directory is required: pass --out or set out in the config")?;

    if args.dry_run {
        print!("{}", pipeline::dry_run(&config, &input)?);
        return Ok(ExitCode::SUCCESS);
    }

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        // Best effort: without a handler, interruption still only loses
        // the in-flight records thanks to the store's write ordering.
        let _ = ctrlc::set_handler(move || {
            eprintln!("stopping: finishing in-flight records, then saving");
            stop.store(true, Ordering::SeqCst);
        });
    }

    let mut options = RunOptions::new(mode, &input, &out);
    options.resume = args.resume;
    options.retry_failed = args.retry_failed;
    options.stop = Some(stop);

    let summary = pipeline::run(&config, &options)?;
    let manifest = RunManifest::load(&out.join(MANIFEST_FILE))?;
    print_summary(&summary, &manifest);

    let clean = summary.finished && summary.failed == 0 && summary.skipped_failed == 0;
    Ok(if clean {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn print_summary(summary: &RunSummary, manifest: &RunManifest) {
    println!("run {} ({})", summary.run_id, summary.mode);
    println!(
        "stored {} chains, {} failed, skipped {} done + {} failed, {} input issues",
        summary.succeeded,
        summary.failed,
        summary.skipped_completed,
        summary.skipped_failed,
        summary.input_issues.len()
    );
    for issue in &summary.input_issues {
        println!("input line {} skipped: {}", issue.line, issue.message);
    }
    if let Some(usage) = &manifest.usage {
        let tags = [
            CallTag::ZeroShot,
            CallTag::Feedback,
            CallTag::Refine,
            CallTag::Judge,
            CallTag::Grade,
        ];
        let per_tag: Vec<String> = tags
            .iter()
            .map(|t| format!("{t} {}", usage.calls(*t)))
            .collect();
        let total = usage.total();
        println!(
            "calls: {}; retries {}; tokens {} prompt / {} completion",
            per_tag.join(", "),
            total.retries,
            total.prompt_tokens,
            total.completion_tokens
        );
    }
    for (id, note) in &manifest.failed {
        println!("failed {id} [{}]: {}", note.class, note.message);
    }
    if summary.finished {
        println!("finished");
    } else {
        println!("stopped early; continue with --resume");
    }
}

fn analyze_command(args: AnalyzeArgs) -> Result<ExitCode, CliError> {
    // A store without a manifest is not a store; fail before measuring.
    let manifest = RunManifest::load(&args.store.join(MANIFEST_FILE))?;
    if !manifest.finished {
        eprintln!("note: this run never finished; the numbers cover what it stored");
    }

    let config = args
        .config
        .as_deref()
        .map(RunConfig::load)
        .transpose()?
        .unwrap_or_default();
    let judge: Option<Arc<Gateway>> = match (&config.backends.judge, &config.backends.refiner) {
        (Some(spec), _) => Some(spec.build("judge")?),
        (None, Some(spec)) => Some(spec.build("refiner")?),
        (None, None) => None,
    };
    let templates = match args.templates.as_deref().or(config.templates.as_deref()) {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let gold: BTreeMap<String, String> = match &args.input {
        Some(path) => pipeline::gold_labels(&load_records(path)?.records),
        None => BTreeMap::new(),
    };

    let options = AnalyzeOptions {
        depth: args.depth,
        trials_per_cell: args.trials,
        repeats: args.repeats,
        seed: args.seed,
    };
    let report = pipeline::analyze(
        &args.store,
        judge.as_deref().map(|g| (g, &templates)),
        &gold,
        &options,
        args.report.as_deref(),
    )?;

    println!("chains: {}", report.chains);
    let lengths: Vec<String> = report
        .histogram
        .iter()
        .map(|(len, count)| format!("{len}:{count}"))
        .collect();
    println!("lengths: {}", lengths.join(" "));
    print_robustness(&report.length);
    if let Some(accuracy) = &report.accuracy {
        print_robustness(accuracy);
    }
    if let Some(score) = &report.judge_score {
        print_robustness(score);
    }
    if let Some(matrix) = &report.win_matrix {
        println!(
            "win matrix: {} positions, {} trials per cell",
            matrix.depth, matrix.trials_per_cell
        );
        print!("{}", matrix.to_csv());
    }
    if let Some(consistency) = &report.consistency {
        let overall = &consistency.overall;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!(
            "consistency: {} agree / {} disagree / {} ties; strict {}, excluding ties {}",
            overall.agree,
            overall.disagree,
            overall.ties,
            fmt(overall.agreement_strict()),
            fmt(overall.agreement_excluding_ties())
        );
    }
    if let Some(dir) = &args.report {
        println!("report files written to {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn print_robustness(report: &prefchain_core::analytics::RobustnessReport) {
    let delta = match report.delta {
        Some(d) => format!("{d:+.2} {}", report.delta_kind),
        None => "no baseline".to_string(),
    };
    println!(
        "{}: {:.2} -> {:.2} ({delta}) over {} chains",
        report.metric, report.before, report.after, report.n
    );
}

fn export_command(args: ExportArgs) -> Result<ExitCode, CliError> {
    let _ = RunManifest::load(&args.store.join(MANIFEST_FILE))?;
    let count = pipeline::export(&args.store, &args.out)?;
    println!("exported {count} pairs to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
