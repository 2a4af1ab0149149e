//! Measurements over a finished chain store: length histograms, pairwise
//! win matrices across chain positions, judge self-consistency replays, and
//! before/after robustness deltas.
//!
//! Every experiment that judges answers runs sequentially with its own
//! seeded generator, so a report is a pure function of the store, the
//! judge, and the seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{CallRequest, CallTag, Gateway};
use crate::chain::{Preference, PreferenceChain};
use crate::judge::{parse_grade_score, parse_verdict, JudgeError};
use crate::prompt::{render_grade, render_judge, Criterion, PromptTemplate};
use crate::store::StoredChain;

/// Count of chains per length (number of accepted answers).
pub fn chain_length_histogram(chains: &[StoredChain]) -> BTreeMap<usize, usize> {
    let mut histogram = BTreeMap::new();
    for stored in chains {
        *histogram.entry(stored.chain.answers.len()).or_insert(0) += 1;
    }
    histogram
}

/// One judge call with the given positional layout; unparseable output is
/// re-asked once and then counted as a tie.
fn single_judgment(
    judge: &Gateway,
    template: &PromptTemplate,
    criteria: &[Criterion],
    query: &str,
    text_a: &str,
    text_b: &str,
) -> Result<Preference, JudgeError> {
    let prompt = render_judge(template, query, text_a, text_b, criteria)?;
    let request = CallRequest {
        tag: CallTag::Judge,
        user: prompt,
        temperature: 0.0,
        max_tokens: None,
    };
    for _ in 0..2 {
        let response = judge.call(&request)?;
        match parse_verdict(&response.text) {
            Ok(verdict) => return Ok(verdict.preferred),
            Err(JudgeError::Unparseable { .. }) => {}
            Err(other) => return Err(other),
        }
    }
    Ok(Preference::Tie)
}

/// Trial counts for one position pair, kept once per unordered pair: the
/// mirror cell reads the same counts, so antisymmetry is exact by
/// construction rather than by sampling twice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStats {
    /// Trials won by the higher (later) chain position.
    pub wins_hi: u64,
    /// Trials won by the lower (earlier) chain position.
    pub wins_lo: u64,
    pub ties: u64,
}

impl CellStats {
    pub fn trials(&self) -> u64 {
        self.wins_hi + self.wins_lo + self.ties
    }

    /// Win rate of the higher position, with ties split evenly.
    pub fn rate_hi(&self) -> Option<f64> {
        let total = self.trials();
        if total == 0 {
            return None;
        }
        Some((self.wins_hi as f64 + self.ties as f64 / 2.0) / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinMatrixOptions {
    /// Compare chain positions `0..depth`.
    pub depth: usize,
    pub trials_per_cell: usize,
    pub seed: u64,
}

/// Pairwise win rates between chain positions, measured by replaying a
/// judge over stored answers with randomized presentation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub depth: usize,
    pub trials_per_cell: usize,
    pub seed: u64,
    /// `cells[lo][hi]` holds the counts for positions `lo < hi`. Pairs
    /// with no chain deep enough are absent.
    pub cells: BTreeMap<usize, BTreeMap<usize, CellStats>>,
}

impl WinMatrix {
    pub fn cell(&self, lo: usize, hi: usize) -> Option<&CellStats> {
        self.cells.get(&lo).and_then(|row| row.get(&hi))
    }

    /// Win rate of position `i` over position `j`. The diagonal is 0.5 by
    /// convention; `None` means no data for the pair.
    pub fn rate(&self, i: usize, j: usize) -> Option<f64> {
        if i >= self.depth || j >= self.depth {
            return None;
        }
        if i == j {
            return Some(0.5);
        }
        let (lo, hi) = (i.min(j), i.max(j));
        let rate_hi = self.cell(lo, hi)?.rate_hi()?;
        Some(if i == hi { rate_hi } else { 1.0 - rate_hi })
    }

    /// Rate grid as CSV; blank cells mean insufficient data.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i\\j");
        for j in 0..self.depth {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for i in 0..self.depth {
            out.push_str(&i.to_string());
            for j in 0..self.depth {
                match self.rate(i, j) {
                    Some(rate) => out.push_str(&format!(",{rate:.4}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Measures how often each later chain position beats each earlier one.
///
/// For every position pair the eligible chains (those deep enough) are
/// cycled through until `trials_per_cell` judgments have been made, each
/// with a coin-flipped presentation order.
pub fn build_win_matrix(
    chains: &[StoredChain],
    judge: &Gateway,
    template: &PromptTemplate,
    criteria: &[Criterion],
    opts: WinMatrixOptions,
) -> Result<WinMatrix, JudgeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cells: BTreeMap<usize, BTreeMap<usize, CellStats>> = BTreeMap::new();
    for lo in 0..opts.depth {
        for hi in lo + 1..opts.depth {
            let eligible: Vec<&PreferenceChain> = chains
                .iter()
                .map(|s| &s.chain)
                .filter(|c| c.answers.len() > hi)
                .collect();
            if eligible.is_empty() || opts.trials_per_cell == 0 {
                continue;
            }
            let mut stats = CellStats::default();
            for trial in 0..opts.trials_per_cell {
                let chain = eligible[trial % eligible.len()];
                let hi_text = &chain.answers[hi].text;
                let lo_text = &chain.answers[lo].text;
                let hi_first: bool = rng.gen_bool(0.5);
                let (a, b) = if hi_first {
                    (hi_text, lo_text)
                } else {
                    (lo_text, hi_text)
                };
                match single_judgment(judge, template, criteria, &chain.query, a, b)? {
                    Preference::Tie => stats.ties += 1,
                    p => {
                        if (p == Preference::A) == hi_first {
                            stats.wins_hi += 1;
                        } else {
                            stats.wins_lo += 1;
                        }
                    }
                }
            }
            cells.entry(lo).or_default().insert(hi, stats);
        }
    }
    Ok(WinMatrix {
        depth: opts.depth,
        trials_per_cell: opts.trials_per_cell,
        seed: opts.seed,
        cells,
    })
}

/// Agreement counts for one replayed comparison group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyCell {
    /// Judge preferred the answer the chain ranked higher.
    pub agree: u64,
    pub disagree: u64,
    pub ties: u64,
}

impl ConsistencyCell {
    fn add(&mut self, other: ConsistencyCell) {
        self.agree += other.agree;
        self.disagree += other.disagree;
        self.ties += other.ties;
    }

    /// Agreement with ties counted against the judge.
    pub fn agreement_strict(&self) -> Option<f64> {
        let total = self.agree + self.disagree + self.ties;
        if total == 0 {
            return None;
        }
        Some(self.agree as f64 / total as f64)
    }

    /// Agreement over decisive replays only.
    pub fn agreement_excluding_ties(&self) -> Option<f64> {
        let decisive = self.agree + self.disagree;
        if decisive == 0 {
            return None;
        }
        Some(self.agree as f64 / decisive as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsistencyOptions {
    /// Replays per pair, each with a fresh coin flip for positioning.
    pub repeats: usize,
    pub seed: u64,
}

/// How reliably a judge reproduces the orderings stored in the chains.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub repeats: usize,
    pub seed: u64,
    /// Keyed by step depth `t`: replays of the pair (answer t, answer t+1).
    pub by_depth: BTreeMap<usize, ConsistencyCell>,
    /// Replays of each chain's final answer against its rejected candidate.
    pub terminal: ConsistencyCell,
    pub overall: ConsistencyCell,
}

/// Replays every adjacent pair in every chain — plus the terminal
/// final-versus-rejected pair where one exists — `repeats` times each with
/// randomized positions, and counts how often the judge reproduces the
/// stored ordering.
pub fn consistency_experiment(
    chains: &[StoredChain],
    judge: &Gateway,
    template: &PromptTemplate,
    criteria: &[Criterion],
    opts: ConsistencyOptions,
) -> Result<ConsistencyReport, JudgeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = ConsistencyReport {
        repeats: opts.repeats,
        seed: opts.seed,
        ..ConsistencyReport::default()
    };

    let replay_pair = |rng: &mut ChaCha8Rng,
                       query: &str,
                       better: &str,
                       worse: &str|
     -> Result<ConsistencyCell, JudgeError> {
        let mut cell = ConsistencyCell::default();
        for _ in 0..opts.repeats {
            let better_first = rng.gen_bool(0.5);
            let (a, b) = if better_first {
                (better, worse)
            } else {
                (worse, better)
            };
            match single_judgment(judge, template, criteria, query, a, b)? {
                Preference::Tie => cell.ties += 1,
                p => {
                    if (p == Preference::A) == better_first {
                        cell.agree += 1;
                    } else {
                        cell.disagree += 1;
                    }
                }
            }
        }
        Ok(cell)
    };

    for stored in chains {
        let chain = &stored.chain;
        for t in 0..chain.answers.len().saturating_sub(1) {
            let cell = replay_pair(
                &mut rng,
                &chain.query,
                &chain.answers[t + 1].text,
                &chain.answers[t].text,
            )?;
            report.by_depth.entry(t).or_default().add(cell);
            report.overall.add(cell);
        }
        if let (Some(rejected), Some(finale)) = (&chain.rejected_candidate, chain.final_answer()) {
            let cell = replay_pair(&mut rng, &chain.query, &finale.text, &rejected.text)?;
            report.terminal.add(cell);
            report.overall.add(cell);
        }
    }
    Ok(report)
}

/// A before/after comparison between first and final answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub metric: String,
    /// Chains that contributed to the comparison.
    pub n: usize,
    pub before: f64,
    pub after: f64,
    /// Absent when the baseline is degenerate (e.g. zero-length answers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// `percent` for relative deltas, `points` for absolute ones.
    pub delta_kind: String,
}

/// Mean answer length in tokens, first versus final, with the relative
/// change in percent.
pub fn length_robustness(chains: &[StoredChain]) -> RobustnessReport {
    let n = chains.len();
    let (mut before_sum, mut after_sum) = (0usize, 0usize);
    for stored in chains {
        before_sum += stored.chain.answers[0].token_count;
        if let Some(finale) = stored.chain.final_answer() {
            after_sum += finale.token_count;
        }
    }
    let before = if n == 0 {
        0.0
    } else {
        before_sum as f64 / n as f64
    };
    let after = if n == 0 {
        0.0
    } else {
        after_sum as f64 / n as f64
    };
    let delta = (before != 0.0).then(|| (after - before) * 100.0 / before);
    RobustnessReport {
        metric: "length_tokens".to_string(),
        n,
        before,
        after,
        delta,
        delta_kind: "percent".to_string(),
    }
}

/// Fraction of answers containing their record's gold string, first versus
/// final, in percent; the delta is in percentage points computed from the
/// underlying counts. Chains without a gold label are skipped.
pub fn accuracy_robustness(
    chains: &[StoredChain],
    gold: &BTreeMap<String, String>,
) -> RobustnessReport {
    let mut n = 0usize;
    let mut before_correct = 0i64;
    let mut after_correct = 0i64;
    for stored in chains {
        let Some(label) = gold.get(&stored.chain.record_id) else {
            continue;
        };
        n += 1;
        if stored.chain.answers[0].text.contains(label.as_str()) {
            before_correct += 1;
        }
        if stored
            .chain
            .final_answer()
            .is_some_and(|a| a.text.contains(label.as_str()))
        {
            after_correct += 1;
        }
    }
    let (before, after, delta) = if n == 0 {
        (0.0, 0.0, None)
    } else {
        (
            before_correct as f64 * 100.0 / n as f64,
            after_correct as f64 * 100.0 / n as f64,
            Some(((after_correct - before_correct) * 100) as f64 / n as f64),
        )
    };
    RobustnessReport {
        metric: "binary_accuracy".to_string(),
        n,
        before,
        after,
        delta,
        delta_kind: "points".to_string(),
    }
}

/// Mean 0-100 grader score, first versus final, delta in points. Chains
/// whose grades fail to parse are skipped.
pub fn score_robustness(
    chains: &[StoredChain],
    grader: &Gateway,
    template: &PromptTemplate,
    criteria: &[Criterion],
) -> Result<RobustnessReport, JudgeError> {
    let grade = |query: &str, answer: &str| -> Result<Option<u32>, JudgeError> {
        let prompt = render_grade(template, query, answer, criteria)?;
        let request = CallRequest {
            tag: CallTag::Grade,
            user: prompt,
            temperature: 0.0,
            max_tokens: None,
        };
        let response = grader.call(&request)?;
        Ok(parse_grade_score(&response.text))
    };

    let mut n = 0usize;
    let (mut before_sum, mut after_sum) = (0u64, 0u64);
    for stored in chains {
        let chain = &stored.chain;
        let Some(finale) = chain.final_answer() else {
            continue;
        };
        let before = grade(&chain.query, &chain.answers[0].text)?;
        let after = grade(&chain.query, &finale.text)?;
        if let (Some(b), Some(a)) = (before, after) {
            n += 1;
            before_sum += u64::from(b);
            after_sum += u64::from(a);
        }
    }
    let before = if n == 0 {
        0.0
    } else {
        before_sum as f64 / n as f64
    };
    let after = if n == 0 {
        0.0
    } else {
        after_sum as f64 / n as f64
    };
    Ok(RobustnessReport {
        metric: "judge_score".to_string(),
        n,
        before,
        after,
        delta: (n > 0).then_some(after - before),
        delta_kind: "points".to_string(),
    })
}

/// `length,count` rows for plotting.
pub fn histogram_csv(histogram: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("length,count\n");
    for (length, count) in histogram {
        out.push_str(&format!("{length},{count}\n"));
    }
    out
}

/// A gnuplot script rendering the histogram CSV as a bar chart.
pub fn histogram_gnuplot(csv_file: &str, png_file: &str) -> String {
    format!(
        "set terminal pngcairo size 800,500\n\
         set output '{png_file}'\n\
         set datafile separator ','\n\
         set boxwidth 0.8\n\
         set style fill solid 0.6\n\
         set xlabel 'Chain length (accepted answers)'\n\
         set ylabel 'Chains'\n\
         plot '{csv_file}' skip 1 using 1:2 with boxes notitle\n"
    )
}

/// CSV rows of the consistency report with both agreement conventions.
pub fn consistency_csv(report: &ConsistencyReport) -> String {
    let mut out =
        String::from("group,agree,disagree,ties,agreement_strict,agreement_excluding_ties\n");
    let mut row = |name: &str, cell: &ConsistencyCell| {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        out.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            cell.agree,
            cell.disagree,
            cell.ties,
            fmt(cell.agreement_strict()),
            fmt(cell.agreement_excluding_ties()),
        ));
    };
    for (depth, cell) in &report.by_depth {
        row(&format!("step_{depth}"), cell);
    }
    row("terminal", &report.terminal);
    row("overall", &report.overall);
    out
}
