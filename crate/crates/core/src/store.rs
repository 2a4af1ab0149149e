//! Durable state: JSONL input loading, the append-only chain store with its
//! atomically-updated run manifest, and SFT export.
//!
//! Crash safety rests on write ordering. Each append writes the chain line
//! and syncs it before the manifest is rewritten (write-temp-then-rename),
//! so the store file is always the authority: on resume the manifest's
//! completed set is rebuilt from whatever lines actually parse, and a torn
//! final line — the read side of an interrupted append — is dropped and
//! truncated away. A malformed line anywhere else is real corruption and
//! stops the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::UsageReport;
use crate::chain::{validate_chain, PreferenceChain, QueryRecord};

/// Bumped when the stored line format changes shape.
pub const SCHEMA_VERSION: u32 = 1;

/// Which strategy produced a store's chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// The judged refinement loop.
    Curate,
    /// Refinement without judging; every rewrite is kept.
    RefinerOnly,
    /// Sample n zero-shot answers and keep the judged best.
    BestOfN,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Curate => "curate",
            RunMode::RefinerOnly => "refiner_only",
            RunMode::BestOfN => "best_of_n",
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "curate" => Ok(RunMode::Curate),
            "refiner_only" | "refiner-only" => Ok(RunMode::RefinerOnly),
            "best_of_n" | "best-of-n" => Ok(RunMode::BestOfN),
            other => Err(format!(
                "unknown mode {other:?}; expected curate, refiner_only, or best_of_n"
            )),
        }
    }
}

/// One line of the chain store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredChain {
    pub schema_version: u32,
    pub mode: RunMode,
    pub chain: PreferenceChain,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: duplicate record id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("chain for record {id:?} is already stored")]
    DuplicateChain { id: String },
    #[error("{path} line {line} is unreadable mid-file; the store is corrupt: {message}")]
    Corruption {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("chain for record {id:?} violates invariants: {}", violations.join("; "))]
    InvalidChain { id: String, violations: Vec<String> },
    #[error("store was written in {store} mode, cannot append {append} chains")]
    ModeMismatch { store: RunMode, append: RunMode },
    #[error("{path} already holds a run; resume it or pick a fresh output directory")]
    StoreExists { path: PathBuf },
    #[error("no manifest at {path}; nothing to resume")]
    ManifestMissing { path: PathBuf },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("input file changed since the run started: digest {found} instead of {expected}")]
    InputChanged { expected: String, found: String },
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A skipped input line and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputIssue {
    pub line: usize,
    pub message: String,
}

/// The parsed input plus everything needed to reason about it later.
#[derive(Debug, Clone)]
pub struct LoadedInput {
    pub records: Vec<QueryRecord>,
    /// Malformed lines that were skipped, in file order.
    pub issues: Vec<InputIssue>,
    /// SHA-256 of the raw file bytes.
    pub digest: String,
}

#[derive(Deserialize)]
struct InputLine {
    #[serde(default)]
    id: Option<String>,
    query: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Streams a JSONL input file: `{"id"?, "query", "answer"?, "metadata"?}`
/// per line. Lines that fail to parse (or carry an empty query) become
/// [`InputIssue`]s rather than errors; records without ids get stable
/// line-derived ones; a repeated id is a hard error.
pub fn load_records(path: &Path) -> Result<LoadedInput, StoreError> {
    let file = File::open(path).map_err(io_at(path))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    let mut raw = Vec::new();
    let mut line_no = 0usize;

    loop {
        raw.clear();
        let n = reader.read_until(b'\n', &mut raw).map_err(io_at(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&raw);
        line_no += 1;
        let text = match std::str::from_utf8(&raw) {
            Ok(t) => t.trim(),
            Err(_) => {
                issues.push(InputIssue {
                    line: line_no,
                    message: "not UTF-8".to_string(),
                });
                continue;
            }
        };
        if text.is_empty() {
            continue;
        }
        let parsed: InputLine = match serde_json::from_str(text) {
            Ok(p) => p,
            Err(e) => {
                issues.push(InputIssue {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if parsed.query.trim().is_empty() {
            issues.push(InputIssue {
                line: line_no,
                message: "query is empty".to_string(),
            });
            continue;
        }
        let id = parsed.id.unwrap_or_else(|| format!("rec-{line_no:06}"));
        if !seen.insert(id.clone()) {
            return Err(StoreError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id,
            });
        }
        records.push(QueryRecord {
            id,
            query: parsed.query,
            initial_answer: parsed.answer,
            metadata: parsed.metadata,
        });
    }

    Ok(LoadedInput {
        records,
        issues,
        digest: hex::encode(hasher.finalize()),
    })
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Stable run identifier derived from what the run will do.
pub fn derive_run_id(input_digest: &str, seed: u64, mode: RunMode) -> String {
    let digest = Sha256::digest(format!("{input_digest}:{seed}:{mode}").as_bytes());
    format!("{}-s{seed}", &hex::encode(digest)[..12])
}

/// Why a record produced no chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureNote {
    pub class: String,
    pub message: String,
}

/// The run's authoritative metadata, rewritten atomically after every
/// append. Deliberately carries no wall-clock fields so identical runs
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub mode: RunMode,
    pub seed: u64,
    pub max_refinements: usize,
    pub input_digest: String,
    /// `template kind -> version@digest` for every prompt the run renders.
    pub template_versions: BTreeMap<String, String>,
    /// Full configuration snapshot for reproducibility.
    pub config: serde_json::Value,
    /// Record ids with a stored chain. Rebuilt from the store on resume.
    pub completed: BTreeSet<String>,
    /// Record ids that produced no chain, with the failure class.
    pub failed: BTreeMap<String, FailureNote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<UsageReport>,
    pub finished: bool,
}

impl RunManifest {
    pub fn new(
        run_id: String,
        mode: RunMode,
        seed: u64,
        max_refinements: usize,
        input_digest: String,
        template_versions: BTreeMap<String, String>,
        config: serde_json::Value,
    ) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            run_id,
            mode,
            seed,
            max_refinements,
            input_digest,
            template_versions,
            config,
            completed: BTreeSet::new(),
            failed: BTreeMap::new(),
            usage: None,
            finished: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::ManifestMissing {
                    path: path.to_path_buf(),
                })
            }
            Err(e) => return Err(io_at(path)(e)),
        };
        serde_json::from_str(&text).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Write-temp-then-rename so a reader (or a crash) never sees a
    /// half-written manifest.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut file = File::create(&tmp).map_err(io_at(&tmp))?;
            let mut text =
                serde_json::to_string_pretty(self).map_err(|source| StoreError::Json {
                    path: tmp.clone(),
                    source,
                })?;
            text.push('\n');
            file.write_all(text.as_bytes()).map_err(io_at(&tmp))?;
            file.sync_all().map_err(io_at(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_at(path))?;
        Ok(())
    }
}

/// Result of scanning a store file.
struct StoreScan {
    chains: Vec<StoredChain>,
    /// Byte length of the well-formed prefix.
    good_len: u64,
    /// True when a torn final line was dropped.
    torn_tail: bool,
}

/// Reads every parseable line. Only the final line may fail to parse — that
/// is the footprint of an interrupted append and is reported as a torn
/// tail; anything else is corruption.
fn scan_store(path: &Path) -> Result<StoreScan, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(StoreScan {
                chains: Vec::new(),
                good_len: 0,
                torn_tail: false,
            })
        }
        Err(e) => return Err(io_at(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut chains = Vec::new();
    let mut good_len = 0u64;
    let mut pending_bad: Option<(usize, String)> = None;
    let mut raw = Vec::new();
    let mut line_no = 0usize;

    loop {
        raw.clear();
        let n = reader.read_until(b'\n', &mut raw).map_err(io_at(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some((bad_line, message)) = pending_bad.take() {
            // The bad line had a successor, so it was not a torn tail.
            return Err(StoreError::Corruption {
                path: path.to_path_buf(),
                line: bad_line,
                message,
            });
        }
        let parsed = std::str::from_utf8(&raw)
            .map_err(|e| e.to_string())
            .and_then(|text| {
                let text = text.trim();
                if text.is_empty() {
                    return Err("blank line".to_string());
                }
                serde_json::from_str::<StoredChain>(text).map_err(|e| e.to_string())
            });
        match parsed {
            Ok(stored) if raw.ends_with(b"\n") => {
                good_len += n as u64;
                chains.push(stored);
            }
            // Parseable but missing its newline: the sync raced the crash.
            // Still only acceptable at the very end of the file.
            Ok(_) => pending_bad = Some((line_no, "line is missing its newline".to_string())),
            Err(message) => pending_bad = Some((line_no, message)),
        }
    }

    Ok(StoreScan {
        chains,
        good_len,
        torn_tail: pending_bad.is_some(),
    })
}

/// Loads a store's chains for analysis or export, tolerating (and
/// ignoring) a torn final line left by a crash.
pub fn load_chains(dir: &Path) -> Result<Vec<StoredChain>, StoreError> {
    Ok(scan_store(&dir.join(CHAINS_FILE))?.chains)
}

pub const CHAINS_FILE: &str = "chains.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Append-only store for one run's chains, plus its manifest.
#[derive(Debug)]
pub struct ChainStore {
    chains_path: PathBuf,
    manifest_path: PathBuf,
    file: File,
    seen_ids: BTreeSet<String>,
    manifest: RunManifest,
}

impl ChainStore {
    /// Starts a fresh run in `dir`. Refuses to touch a directory that
    /// already holds one.
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let chains_path = dir.join(CHAINS_FILE);
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() || chains_path.exists() {
            return Err(StoreError::StoreExists {
                path: dir.to_path_buf(),
            });
        }
        manifest.save(&manifest_path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&chains_path)
            .map_err(io_at(&chains_path))?;
        Ok(ChainStore {
            chains_path,
            manifest_path,
            file,
            seen_ids: BTreeSet::new(),
            manifest,
        })
    }

    /// Reopens an interrupted or finished run: loads the manifest, drops a
    /// torn final line if one exists, and rebuilds the completed set from
    /// the lines that actually survived.
    pub fn resume(dir: &Path) -> Result<Self, StoreError> {
        let chains_path = dir.join(CHAINS_FILE);
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = RunManifest::load(&manifest_path)?;
        let scan = scan_store(&chains_path)?;

        let mut seen_ids = BTreeSet::new();
        for stored in &scan.chains {
            if stored.mode != manifest.mode {
                return Err(StoreError::ModeMismatch {
                    store: manifest.mode,
                    append: stored.mode,
                });
            }
            if !seen_ids.insert(stored.chain.record_id.clone()) {
                return Err(StoreError::DuplicateChain {
                    id: stored.chain.record_id.clone(),
                });
            }
        }

        if scan.torn_tail {
            let file = OpenOptions::new()
                .write(true)
                .open(&chains_path)
                .map_err(io_at(&chains_path))?;
            file.set_len(scan.good_len).map_err(io_at(&chains_path))?;
            file.sync_all().map_err(io_at(&chains_path))?;
        }

        // The store is the authority; the manifest's completed set is just
        // a cache of it.
        manifest.completed = seen_ids.clone();
        manifest.save(&manifest_path)?;

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&chains_path)
            .map_err(io_at(&chains_path))?;
        Ok(ChainStore {
            chains_path,
            manifest_path,
            file,
            seen_ids,
            manifest,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn completed(&self) -> &BTreeSet<String> {
        &self.manifest.completed
    }

    /// Appends one chain: validate, write the line, sync it, then rewrite
    /// the manifest. Curate and best-of-n chains must satisfy every chain
    /// invariant; refiner-only traces deliberately carry no verdicts, so
    /// they skip that check.
    pub fn append(&mut self, chain: PreferenceChain) -> Result<(), StoreError> {
        let mode = self.manifest.mode;
        if mode != RunMode::RefinerOnly {
            let violations = validate_chain(&chain, self.manifest.max_refinements);
            if !violations.is_empty() {
                return Err(StoreError::InvalidChain {
                    id: chain.record_id,
                    violations,
                });
            }
        }
        if self.seen_ids.contains(&chain.record_id) {
            return Err(StoreError::DuplicateChain {
                id: chain.record_id,
            });
        }

        let id = chain.record_id.clone();
        let stored = StoredChain {
            schema_version: SCHEMA_VERSION,
            mode,
            chain,
        };
        let mut line = serde_json::to_string(&stored).map_err(|source| StoreError::Json {
            path: self.chains_path.clone(),
            source,
        })?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(io_at(&self.chains_path))?;
        self.file.sync_all().map_err(io_at(&self.chains_path))?;

        self.seen_ids.insert(id.clone());
        self.manifest.completed.insert(id);
        self.manifest.save(&self.manifest_path)
    }

    /// Records that a record produced no chain.
    pub fn record_failure(
        &mut self,
        id: &str,
        class: &str,
        message: &str,
    ) -> Result<(), StoreError> {
        self.manifest.failed.insert(
            id.to_string(),
            FailureNote {
                class: class.to_string(),
                message: message.to_string(),
            },
        );
        self.manifest.save(&self.manifest_path)
    }

    /// Forgets previous failures so they are attempted again.
    pub fn clear_failures(&mut self) -> Result<(), StoreError> {
        self.manifest.failed.clear();
        self.manifest.save(&self.manifest_path)
    }

    /// Persists usage accounting without declaring the run finished, for
    /// runs that stop early and expect a resume.
    pub fn record_usage(&mut self, usage: UsageReport) -> Result<(), StoreError> {
        self.manifest.usage = Some(usage);
        self.manifest.save(&self.manifest_path)
    }

    /// Marks the run complete and stores its final usage accounting.
    pub fn finish(&mut self, usage: UsageReport) -> Result<(), StoreError> {
        self.manifest.usage = Some(usage);
        self.manifest.finished = true;
        self.manifest.save(&self.manifest_path)
    }
}

/// One training pair: the query and the chain's last accepted answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub prompt: String,
    pub completion: String,
    pub chain_length: usize,
    pub termination: String,
}

/// Writes one JSONL training pair per stored chain. A length-1 chain
/// exports its only answer. Returns how many pairs were written.
pub fn export_sft(chains: &[StoredChain], out: &Path) -> Result<usize, StoreError> {
    let mut file = File::create(out).map_err(io_at(out))?;
    let mut written = 0usize;
    for stored in chains {
        let final_answer = match stored.chain.final_answer() {
            Some(a) => a,
            None => continue,
        };
        let pair = SftPair {
            prompt: stored.chain.query.clone(),
            completion: final_answer.text.clone(),
            chain_length: stored.chain.answers.len(),
            termination: stored.chain.termination.as_str().to_string(),
        };
        let mut line = serde_json::to_string(&pair).map_err(|source| StoreError::Json {
            path: out.to_path_buf(),
            source,
        })?;
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_at(out))?;
        written += 1;
    }
    file.sync_all().map_err(io_at(out))?;
    Ok(written)
}
