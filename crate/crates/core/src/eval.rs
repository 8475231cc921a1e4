//! Scoring of predicted queries.
//!
//! Execution accuracy counts predictions whose result fingerprint equals
//! the gold query's. The valid efficiency score rewards each match with
//! `sqrt(gold_time / predicted_time)` and every miss with 0, then reports
//! `100 * mean`. Examples whose gold query fails to execute are data
//! errors: they are listed and left out of every denominator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench_data::{extract_gold_identifiers, BenchmarkExample, DbSchema, Difficulty};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::{ExecStatus, Executor};
use crate::linking::LinkedSchema;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Times below this are treated as this, so a zero-cost query cannot
/// produce an infinite reward.
const MIN_TIME_MS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub example_id: String,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub predicted: Option<String>,
    /// Execution status of the prediction; `None` when there was none.
    pub pred_status: Option<ExecStatus>,
    pub matched: bool,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_warning: Option<String>,
}

impl Verdict {
    pub fn gold_ok(&self) -> bool {
        self.gold_error.is_none()
    }
}

fn reward(executor: &Executor, db: &Path, gold: &str, pred: &str, repeats: usize) -> (f64, Option<String>) {
    let timed = executor
        .time_query(db, gold, repeats)
        .and_then(|g| executor.time_query(db, pred, repeats).map(|p| (g, p)));
    match timed {
        Ok((g, p)) => ((g.max(MIN_TIME_MS) / p.max(MIN_TIME_MS)).sqrt(), None),
        Err(e) => (1.0, Some(e.to_string())),
    }
}

fn score_one(
    example: &BenchmarkExample,
    predicted: Option<&str>,
    db_paths: &BTreeMap<String, PathBuf>,
    executor: &Executor,
    repeats: usize,
) -> Verdict {
    let mut verdict = Verdict {
        example_id: example.example_id.clone(),
        db_id: example.db_id.clone(),
        difficulty: example.difficulty,
        predicted: predicted.map(str::to_string),
        pred_status: None,
        matched: false,
        reward: 0.0,
        gold_error: None,
        timing_warning: None,
    };
    let Some(db) = db_paths.get(&example.db_id) else {
        verdict.gold_error = Some(format!("no database for `{}`", example.db_id));
        return verdict;
    };
    let gold = executor.execute(db, &example.gold_sql);
    if !gold.is_ok() {
        verdict.gold_error = Some(format!(
            "{:?}: {}",
            gold.status,
            gold.error.unwrap_or_default()
        ));
        return verdict;
    }
    let Some(pred_sql) = predicted else {
        return verdict;
    };
    let pred = executor.execute(db, pred_sql);
    verdict.pred_status = Some(pred.status);
    verdict.matched = pred.is_ok() && pred.fingerprint == gold.fingerprint;
    if verdict.matched {
        let (r, warning) = reward(executor, db, &example.gold_sql, pred_sql, repeats);
        if let Some(w) = &warning {
            tracing::warn!(example = %example.example_id, "{w}; reward set to 1.0");
        }
        verdict.reward = r;
        verdict.timing_warning = warning;
    }
    verdict
}

/// Scores every example in parallel. A missing entry in `predictions`
/// and an entry holding `None` both mean unanswered.
pub fn score_examples(
    predictions: &BTreeMap<String, Option<String>>,
    examples: &[BenchmarkExample],
    db_paths: &BTreeMap<String, PathBuf>,
    config: &RunConfig,
) -> Vec<Verdict> {
    let executor = Executor::from_config(config);
    examples
        .par_iter()
        .map(|ex| {
            let predicted = predictions.get(&ex.example_id).and_then(Option::as_deref);
            score_one(ex, predicted, db_paths, &executor, config.ves_repeats.max(1))
        })
        .collect()
}

fn pct(hits: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        100.0 * hits as f64 / count as f64
    }
}

/// Overall and per-difficulty accuracy over the verdicts with a working
/// gold query.
pub fn accuracy_of(verdicts: &[Verdict]) -> (f64, BTreeMap<Difficulty, f64>) {
    let mut buckets: BTreeMap<Difficulty, (usize, usize)> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.gold_ok()) {
        let b = buckets.entry(v.difficulty).or_default();
        b.0 += usize::from(v.matched);
        b.1 += 1;
    }
    let hits: usize = buckets.values().map(|b| b.0).sum();
    let count: usize = buckets.values().map(|b| b.1).sum();
    let by = buckets.into_iter().map(|(d, (h, c))| (d, pct(h, c))).collect();
    (pct(hits, count), by)
}

pub fn ves_of(verdicts: &[Verdict]) -> f64 {
    let scored: Vec<f64> = verdicts
        .iter()
        .filter(|v| v.gold_ok())
        .map(|v| if v.matched { v.reward } else { 0.0 })
        .collect();
    if scored.is_empty() {
        0.0
    } else {
        100.0 * scored.iter().sum::<f64>() / scored.len() as f64
    }
}

pub fn exec_accuracy(
    predictions: &BTreeMap<String, Option<String>>,
    examples: &[BenchmarkExample],
    db_paths: &BTreeMap<String, PathBuf>,
    config: &RunConfig,
) -> (f64, BTreeMap<Difficulty, f64>) {
    accuracy_of(&score_examples(predictions, examples, db_paths, config))
}

pub fn valid_efficiency_score(
    predictions: &BTreeMap<String, Option<String>>,
    examples: &[BenchmarkExample],
    db_paths: &BTreeMap<String, PathBuf>,
    config: &RunConfig,
) -> f64 {
    ves_of(&score_examples(predictions, examples, db_paths, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub table_recall: f64,
    pub column_recall: f64,
    pub count: usize,
    /// Examples whose gold query yielded no identifiers.
    pub vacuous: Vec<String>,
    pub table_misses: Vec<String>,
    pub column_misses: Vec<String>,
}

/// Share of examples whose linked schema contains every gold table (and
/// separately every gold column). An example without a linked schema
/// misses both.
pub fn linking_recall(
    linked: &BTreeMap<String, LinkedSchema>,
    examples: &[BenchmarkExample],
    schemas: &BTreeMap<String, DbSchema>,
) -> Recall {
    let mut out = Recall {
        table_recall: 0.0,
        column_recall: 0.0,
        count: examples.len(),
        vacuous: Vec::new(),
        table_misses: Vec::new(),
        column_misses: Vec::new(),
    };
    let (mut table_hits, mut column_hits) = (0, 0);
    for ex in examples {
        let (Some(l), Some(schema)) = (linked.get(&ex.example_id), schemas.get(&ex.db_id)) else {
            out.table_misses.push(ex.example_id.clone());
            out.column_misses.push(ex.example_id.clone());
            continue;
        };
        let gold = extract_gold_identifiers(&ex.gold_sql, schema);
        if gold.tables.is_empty() && gold.columns.is_empty() {
            out.vacuous.push(ex.example_id.clone());
        }
        if gold.tables.is_subset(&l.table_set()) {
            table_hits += 1;
        } else {
            out.table_misses.push(ex.example_id.clone());
        }
        if gold.columns.is_subset(&l.column_set()) {
            column_hits += 1;
        } else {
            out.column_misses.push(ex.example_id.clone());
        }
    }
    out.table_recall = pct(table_hits, examples.len());
    out.column_recall = pct(column_hits, examples.len());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub ex_overall: f64,
    pub ex_by_difficulty: BTreeMap<Difficulty, f64>,
    pub ves: f64,
    #[serde(default)]
    pub linking_table_recall: Option<f64>,
    #[serde(default)]
    pub linking_column_recall: Option<f64>,
    /// Scored examples per difficulty; sums to `total`.
    pub counts: BTreeMap<Difficulty, usize>,
    pub total: usize,
    pub matched: usize,
    pub unanswered: usize,
    pub gold_failures: Vec<String>,
    pub timing_warnings: Vec<String>,
}

impl EvalReport {
    pub fn from_verdicts(verdicts: &[Verdict], recall: Option<&Recall>) -> Self {
        let (ex_overall, ex_by_difficulty) = accuracy_of(verdicts);
        let mut counts: BTreeMap<Difficulty, usize> = BTreeMap::new();
        for v in verdicts.iter().filter(|v| v.gold_ok()) {
            *counts.entry(v.difficulty).or_default() += 1;
        }
        EvalReport {
            version: REPORT_FORMAT_VERSION,
            ex_overall,
            ex_by_difficulty,
            ves: ves_of(verdicts),
            linking_table_recall: recall.map(|r| r.table_recall),
            linking_column_recall: recall.map(|r| r.column_recall),
            total: counts.values().sum(),
            counts,
            matched: verdicts.iter().filter(|v| v.gold_ok() && v.matched).count(),
            unanswered: verdicts.iter().filter(|v| v.predicted.is_none()).count(),
            gold_failures: verdicts
                .iter()
                .filter(|v| !v.gold_ok())
                .map(|v| v.example_id.clone())
                .collect(),
            timing_warnings: verdicts
                .iter()
                .filter(|v| v.timing_warning.is_some())
                .map(|v| v.example_id.clone())
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>7}{:>9}", "difficulty", "count", "EX");
        for (d, ex) in &self.ex_by_difficulty {
            let _ = writeln!(s, "{:<14}{:>7}{:>9.2}", d.as_str(), self.counts.get(d).copied().unwrap_or(0), ex);
        }
        let _ = writeln!(s, "{:<14}{:>7}{:>9.2}", "all", self.total, self.ex_overall);
        let _ = writeln!(s);
        let _ = writeln!(s, "VES               {:>9.2}", self.ves);
        if let (Some(t), Some(c)) = (self.linking_table_recall, self.linking_column_recall) {
            let _ = writeln!(s, "table recall      {t:>9.2}");
            let _ = writeln!(s, "column recall     {c:>9.2}");
        }
        let _ = writeln!(s, "unanswered        {:>9}", self.unanswered);
        if !self.gold_failures.is_empty() {
            let _ = writeln!(s, "gold failures: {}", self.gold_failures.join(", "));
        }
        if !self.timing_warnings.is_empty() {
            let _ = writeln!(s, "timing fell back to 1.0: {}", self.timing_warnings.join(", "));
        }
        s
    }
}

pub fn write_verdicts_csv(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| Error::Data(format!("csv encoding failed: {e}"));
    w.write_record(["example_id", "db_id", "difficulty", "status", "matched", "reward", "predicted"])
        .map_err(row_err)?;
    for v in verdicts {
        let status = match (&v.gold_error, v.pred_status) {
            (Some(_), _) => "gold_error".to_string(),
            (None, None) => "unanswered".to_string(),
            (None, Some(s)) => serde_json::to_value(s)?.as_str().unwrap_or_default().to_string(),
        };
        w.write_record([
            v.example_id.as_str(),
            v.db_id.as_str(),
            v.difficulty.as_str(),
            &status,
            if v.matched { "1" } else { "0" },
            &format!("{:.6}", v.reward),
            v.predicted.as_deref().unwrap_or(""),
        ])
        .map_err(row_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::util::write_atomic(path, &bytes)
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ex: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(13);
    let mut s = format!("{:<width$}  {:>7}\n", "configuration", "EX");
    for r in rows {
        match (r.ex, &r.error) {
            (Some(ex), _) => {
                let _ = writeln!(s, "{:<width$}  {ex:>7.2}", r.name);
            }
            (None, e) => {
                let _ = writeln!(s, "{:<width$}  {:>7}  {}", r.name, "error", e.as_deref().unwrap_or(""));
            }
        }
    }
    s
}
