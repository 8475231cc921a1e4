//! Execution-based candidate selection.
//!
//! 1. Drop candidates that did not execute; the rest form a pool of size N.
//! 2. Confidence of a candidate = size of its result group / N.
//! 3. Keep the fastest member of each result group.
//! 4. Keep groups with confidence >= T (the best one if none survives).
//! 5. With two or more survivors, ask the model to pick one from a
//!    numbered list `n` times and take the majority.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::exec::{ExecStatus, ExecutionOutcome, ResultFingerprint};
use crate::fewshot::FewShotList;
use crate::generate::{render_database_context, render_examples, CandidateQuery, ExampleContext};
use crate::llm::{parse_json_answer, Gateway, LlmRequest};
use crate::sql_text::match_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub query: CandidateQuery,
    pub outcome: ExecutionOutcome,
    pub confidence: f64,
}

impl ScoredCandidate {
    pub fn fingerprint(&self) -> ResultFingerprint {
        self.outcome.fingerprint.expect("scored candidates executed successfully")
    }

    pub fn exec_time_ms(&self) -> f64 {
        self.outcome.exec_time_ms.expect("scored candidates executed successfully")
    }

    fn provenance(&self) -> (usize, usize) {
        (self.query.prompt_index, self.query.sample_index)
    }
}

/// Drops failed executions, then scores each survivor by the share of the
/// survivors that produced the same result.
pub fn score_pool(candidates: &[CandidateQuery], outcomes: &[ExecutionOutcome]) -> Vec<ScoredCandidate> {
    assert_eq!(candidates.len(), outcomes.len(), "candidates and outcomes must be aligned");
    let ok: Vec<(&CandidateQuery, &ExecutionOutcome)> = candidates
        .iter()
        .zip(outcomes)
        .filter(|(_, o)| o.status == ExecStatus::Ok && o.fingerprint.is_some() && o.exec_time_ms.is_some())
        .collect();
    let n = ok.len() as f64;
    let mut groups: HashMap<ResultFingerprint, usize> = HashMap::new();
    for (_, o) in &ok {
        *groups.entry(o.fingerprint.expect("checked")).or_default() += 1;
    }
    ok.into_iter()
        .map(|(q, o)| ScoredCandidate {
            query: q.clone(),
            outcome: o.clone(),
            confidence: groups[&o.fingerprint.expect("checked")] as f64 / n,
        })
        .collect()
}

/// One candidate per result group: the fastest, ties to the earliest
/// (prompt_index, sample_index). Groups keep the order of their first
/// member in `pool`.
pub fn dedup_fastest(pool: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let mut slot: HashMap<ResultFingerprint, usize> = HashMap::new();
    let mut out: Vec<ScoredCandidate> = Vec::new();
    for candidate in pool {
        match slot.get(&candidate.fingerprint()) {
            None => {
                slot.insert(candidate.fingerprint(), out.len());
                out.push(candidate.clone());
            }
            Some(&i) => {
                let kept = &out[i];
                let faster = candidate
                    .exec_time_ms()
                    .total_cmp(&kept.exec_time_ms())
                    .then_with(|| candidate.provenance().cmp(&kept.provenance()))
                    .is_lt();
                if faster {
                    out[i] = candidate.clone();
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filtered {
    pub kept: Vec<ScoredCandidate>,
    /// Nothing reached the threshold and the best candidate was kept.
    pub below_threshold_fallback: bool,
}

/// Highest confidence first; ties by provenance.
pub fn by_confidence(candidates: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.provenance().cmp(&b.provenance()))
    });
    sorted
}

pub fn filter_threshold(deduped: &[ScoredCandidate], threshold: f64) -> Filtered {
    let kept: Vec<ScoredCandidate> = deduped.iter().filter(|c| c.confidence >= threshold).cloned().collect();
    if kept.is_empty() && !deduped.is_empty() {
        return Filtered {
            kept: by_confidence(deduped).into_iter().take(1).collect(),
            below_threshold_fallback: true,
        };
    }
    Filtered {
        kept,
        below_threshold_fallback: false,
    }
}

const MCS_INSTRUCTION: &str = "### When a DB schema, a question, and a knowledge evidence are given, and up to three SQLite queries expressing the question are given, please choose the most accurate SQL based on the Checklist.";

const MCS_CHECKLIST: &str = r#"### Checklist:
1. The SQL should accurately represent the question.
2. The SQL should accurately use the given knowledge evidence.
3. The SELECT clause should not include any additional columns that are not included in the question.
4. The order of columns in the SELECT clause must be the same as the order in the question.
5. Check if the operations are being performed correctly according to the column type.

### Instruction:
- If the first SQL satisfies all the conditions of the checklist, please choose the first SQL. If not, move on to the next SQL.
- If there's no SQL that satisfies all the requirements on the checklist, just choose the first SQL.
- Provide a detailed step-by-step explanation following the order of the checklist when checking whether each SQL satisfies the checklist.
- Your answer should strictly follow the following json format.
{
  "reasoning": "",  // The reasoning steps for choosing the best SQL.
  "sql": "",  // The final chosen SQL.
}

### Your Answer:"#;

/// Multiple-choice prompt listing `candidates` in the given order.
pub fn build_mcs_prompt(
    candidates: &[String],
    ctx: &ExampleContext<'_>,
    fewshot: &FewShotList,
    sample_rows: usize,
) -> Result<String> {
    let numbered: Vec<String> = candidates
        .iter()
        .enumerate()
        .map(|(i, sql)| format!("{}. {}", i + 1, sql.lines().map(str::trim).collect::<Vec<_>>().join(" ")))
        .collect();
    Ok(format!(
        "{MCS_INSTRUCTION}\n\n{}{}\n### Candidate SQLs:\n{}\n\n{MCS_CHECKLIST}",
        render_examples(fewshot),
        render_database_context(ctx, sample_rows)?,
        numbered.join("\n"),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    EmptyPool,
    SingleCandidate,
    NoVoteMatch,
    BelowThresholdFallback,
    /// The voting request failed; the top candidate was used.
    GatewayFailure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub raw: usize,
    pub executable: usize,
    pub deduped: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteCount {
    pub sql: String,
    pub confidence: f64,
    pub votes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub final_sql: Option<String>,
    pub pool_sizes: PoolSizes,
    /// Rendered choices in prompt order with their votes; empty when no
    /// vote took place.
    pub vote_tally: Vec<VoteCount>,
    pub votes_cast: usize,
    pub votes_matched: usize,
    /// Survivors left out of the prompt by `max_choices`.
    pub truncated: usize,
    pub fallback_reason: Option<FallbackReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SelectionResult {
    /// No final query yet.
    pub fn empty(pool_sizes: PoolSizes) -> Self {
        SelectionResult {
            final_sql: None,
            pool_sizes,
            vote_tally: Vec::new(),
            votes_cast: 0,
            votes_matched: 0,
            truncated: 0,
            fallback_reason: None,
            error: None,
        }
    }
}

/// Outcome of counting votes over the rendered choices.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Index into the choices.
    pub winner: usize,
    pub tally: Vec<usize>,
    pub matched: usize,
    pub no_vote_match: bool,
}

/// Pure vote resolution. `choices` are ordered by descending confidence;
/// each vote is the `sql` an answer named, or `None` if it had none.
/// Most votes wins, then higher confidence, then earlier choice; with no
/// matched vote the first (most confident) choice wins.
pub fn decide(choices: &[ScoredCandidate], votes: &[Option<String>]) -> Decision {
    let keys: Vec<String> = choices.iter().map(|c| match_key(&c.query.sql)).collect();
    let mut tally = vec![0usize; choices.len()];
    for vote in votes.iter().flatten() {
        let key = match_key(vote);
        if let Some(i) = keys.iter().position(|k| *k == key) {
            tally[i] += 1;
        }
    }
    let matched: usize = tally.iter().sum();
    if matched == 0 {
        return Decision {
            winner: 0,
            tally,
            matched,
            no_vote_match: true,
        };
    }
    let winner = (0..choices.len())
        .min_by(|&a, &b| {
            tally[b]
                .cmp(&tally[a])
                .then_with(|| choices[b].confidence.total_cmp(&choices[a].confidence))
                .then_with(|| a.cmp(&b))
        })
        .expect("non-empty");
    Decision {
        winner,
        tally,
        matched,
        no_vote_match: false,
    }
}

/// The selection input for one question after execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Funnel {
    pub sizes: PoolSizes,
    pub filtered: Filtered,
}

/// Score, deduplicate and threshold a pool. With `use_filtering` off the
/// threshold is not applied.
pub fn funnel(candidates: &[CandidateQuery], outcomes: &[ExecutionOutcome], threshold: f64, use_filtering: bool) -> Funnel {
    let scored = score_pool(candidates, outcomes);
    let deduped = dedup_fastest(&scored);
    let filtered = if use_filtering {
        filter_threshold(&deduped, threshold)
    } else {
        Filtered {
            kept: deduped.clone(),
            below_threshold_fallback: false,
        }
    };
    Funnel {
        sizes: PoolSizes {
            raw: candidates.len(),
            executable: scored.len(),
            deduped: deduped.len(),
            filtered: filtered.kept.len(),
        },
        filtered,
    }
}

/// Picks the final query from the filtered pool, voting with the model
/// when more than one candidate remains.
pub fn select_final(
    gateway: &Gateway,
    funnel: &Funnel,
    ctx: &ExampleContext<'_>,
    fewshot: &FewShotList,
    config: &RunConfig,
) -> Result<SelectionResult> {
    let mut result = SelectionResult::empty(funnel.sizes);
    let ordered = by_confidence(&funnel.filtered.kept);
    let Some(top) = ordered.first() else {
        result.fallback_reason = Some(FallbackReason::EmptyPool);
        return Ok(result);
    };
    if funnel.filtered.below_threshold_fallback {
        result.final_sql = Some(top.query.sql.clone());
        result.fallback_reason = Some(FallbackReason::BelowThresholdFallback);
        return Ok(result);
    }
    if ordered.len() == 1 {
        result.final_sql = Some(top.query.sql.clone());
        result.fallback_reason = Some(FallbackReason::SingleCandidate);
        return Ok(result);
    }
    if !config.use_mcs {
        result.final_sql = Some(top.query.sql.clone());
        return Ok(result);
    }
    let choices: Vec<ScoredCandidate> = ordered.iter().take(config.max_choices.max(1)).cloned().collect();
    result.truncated = ordered.len() - choices.len();
    if choices.len() == 1 {
        result.final_sql = Some(top.query.sql.clone());
        result.fallback_reason = Some(FallbackReason::SingleCandidate);
        return Ok(result);
    }
    let sqls: Vec<String> = choices.iter().map(|c| c.query.sql.clone()).collect();
    let prompt = build_mcs_prompt(&sqls, ctx, fewshot, config.sample_rows)?;
    let request = LlmRequest::new(prompt, "select")
        .samples(config.samples, config.temperature)
        .max_output_tokens(config.max_output_tokens);
    let completions = match gateway.complete(&request) {
        Ok(c) => c,
        Err(e) => {
            result.final_sql = Some(top.query.sql.clone());
            result.fallback_reason = Some(FallbackReason::GatewayFailure);
            result.error = Some(e.to_string());
            return Ok(result);
        }
    };
    let votes: Vec<Option<String>> = completions
        .iter()
        .map(|c| {
            parse_json_answer(&c.raw_text, &["sql"])
                .ok()
                .and_then(|m| m.get("sql").and_then(|v| v.as_str()).map(str::to_string))
        })
        .collect();
    let decision = decide(&choices, &votes);
    result.votes_cast = votes.len();
    result.votes_matched = decision.matched;
    result.vote_tally = choices
        .iter()
        .zip(&decision.tally)
        .map(|(c, &votes)| VoteCount {
            sql: c.query.sql.clone(),
            confidence: c.confidence,
            votes,
        })
        .collect();
    result.final_sql = Some(choices[decision.winner].query.sql.clone());
    if decision.no_vote_match {
        result.fallback_reason = Some(FallbackReason::NoVoteMatch);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::exec::{normalize_and_fingerprint, Cell, ResultSemantics};

    fn fp(group: i64) -> ResultFingerprint {
        normalize_and_fingerprint(&[vec![Cell::Int(group)]], ResultSemantics::Multiset)
    }

    fn ok(group: i64, time: f64) -> ExecutionOutcome {
        ExecutionOutcome {
            status: ExecStatus::Ok,
            fingerprint: Some(fp(group)),
            row_count: Some(1),
            exec_time_ms: Some(time),
            error: None,
        }
    }

    fn failed() -> ExecutionOutcome {
        ExecutionOutcome {
            status: ExecStatus::SyntaxError,
            fingerprint: None,
            row_count: None,
            exec_time_ms: None,
            error: Some("bad".into()),
        }
    }

    fn cand(i: usize) -> CandidateQuery {
        CandidateQuery {
            sql: format!("SELECT {i}"),
            prompt_index: i / 100,
            sample_index: i % 100,
            reasoning: String::new(),
        }
    }

    fn pool(groups: &[(i64, usize)], errors: usize) -> (Vec<CandidateQuery>, Vec<ExecutionOutcome>) {
        let mut c = Vec::new();
        let mut o = Vec::new();
        for &(g, size) in groups {
            for _ in 0..size {
                c.push(cand(c.len()));
                o.push(ok(g, 10.0 + c.len() as f64));
            }
        }
        for _ in 0..errors {
            c.push(cand(c.len()));
            o.push(failed());
        }
        (c, o)
    }

    fn group_conf(scored: &[ScoredCandidate], g: i64) -> f64 {
        scored.iter().find(|s| s.fingerprint() == fp(g)).unwrap().confidence
    }

    #[test]
    fn confidences_12_5_3() {
        let (c, o) = pool(&[(1, 12), (2, 5), (3, 3)], 0);
        let s = score_pool(&c, &o);
        assert_eq!(group_conf(&s, 1), 0.60);
        assert_eq!(group_conf(&s, 2), 0.25);
        assert_eq!(group_conf(&s, 3), 0.15);
        let (c, o) = pool(&[(1, 12), (2, 5), (3, 3)], 3);
        let with_errors = score_pool(&c, &o);
        assert_eq!(with_errors.len(), 20);
        assert_eq!(group_conf(&with_errors, 1), 0.60);
        let (c, o) = pool(&[(1, 1)], 0);
        assert_eq!(score_pool(&c, &o)[0].confidence, 1.0);
        let (c, o) = pool(&[], 4);
        assert!(score_pool(&c, &o).is_empty());
    }

    #[test]
    fn dedup_keeps_fastest_and_breaks_ties_by_provenance() {
        let c: Vec<CandidateQuery> = (0..3).map(cand).collect();
        let o = vec![ok(1, 40.0), ok(1, 12.0), ok(1, 55.0)];
        let d = dedup_fastest(&score_pool(&c, &o));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].query.sql, "SELECT 1");
        let tie = vec![ok(1, 5.0), ok(1, 5.0), ok(2, 1.0)];
        let d = dedup_fastest(&score_pool(&c, &o.iter().take(0).cloned().chain(tie).collect::<Vec<_>>()));
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].query.sql, "SELECT 0");
        assert_eq!(d[0].confidence, 2.0 / 3.0);
    }

    #[test]
    fn threshold_examples() {
        let (c, o) = pool(&[(1, 12), (2, 5), (3, 3)], 0);
        let d = dedup_fastest(&score_pool(&c, &o));
        let f = filter_threshold(&d, 0.2);
        let mut confs: Vec<f64> = f.kept.iter().map(|s| s.confidence).collect();
        confs.sort_by(f64::total_cmp);
        assert_eq!(confs, vec![0.25, 0.60]);
        assert!(!f.below_threshold_fallback);
        assert_eq!(filter_threshold(&d, 0.0).kept, d);
        let f = filter_threshold(&d, 0.9);
        assert!(f.below_threshold_fallback);
        assert_eq!(f.kept.len(), 1);
        assert_eq!(f.kept[0].confidence, 0.60);
        assert!(!filter_threshold(&[], 0.5).below_threshold_fallback);
    }

    fn choice(sql: &str, confidence: f64) -> ScoredCandidate {
        ScoredCandidate {
            query: CandidateQuery {
                sql: sql.into(),
                prompt_index: 0,
                sample_index: 0,
                reasoning: String::new(),
            },
            outcome: ok(1, 1.0),
            confidence,
        }
    }

    #[test]
    fn majority_vote_with_unmatched_and_unparseable() {
        let choices = vec![choice("SELECT a FROM t", 0.6), choice("SELECT b FROM t", 0.25)];
        let mut votes: Vec<Option<String>> = Vec::new();
        votes.extend(std::iter::repeat_n(Some("select  a\nFROM t;".to_string()), 7));
        votes.extend(std::iter::repeat_n(Some("SELECT b FROM t".to_string()), 9));
        votes.extend(std::iter::repeat_n(None, 4));
        votes.push(Some("SELECT c FROM t".into()));
        let d = decide(&choices, &votes);
        assert_eq!(d.winner, 1);
        assert_eq!(d.tally, vec![7, 9]);
        assert_eq!(d.matched, 16);
    }

    #[test]
    fn vote_ties_prefer_confidence_then_order() {
        let choices = vec![choice("SELECT 1", 0.3), choice("SELECT 2", 0.5), choice("SELECT 3", 0.5)];
        let votes = vec![Some("SELECT 1".into()), Some("SELECT 2".into()), Some("SELECT 3".into())];
        assert_eq!(decide(&choices, &votes).winner, 1);
        let none = decide(&choices, &[None, Some("SELECT 4".into())]);
        assert!(none.no_vote_match);
        assert_eq!(none.winner, 0);
    }

    #[test]
    fn match_key_keeps_literal_case() {
        let choices = vec![choice("SELECT * FROM t WHERE x = 'A'", 0.5), choice("SELECT 2", 0.5)];
        let d = decide(&choices, &[Some("select * from T where X = 'a'".into())]);
        assert!(d.no_vote_match);
    }

    proptest! {
        #[test]
        fn conservation_dedup_and_monotonicity(
            sizes in proptest::collection::vec(1usize..30, 1..8),
            errors in 0usize..5,
        ) {
            let groups: Vec<(i64, usize)> = sizes.iter().enumerate().map(|(g, &s)| (g as i64, s)).collect();
            let (c, o) = pool(&groups, errors);
            let scored = score_pool(&c, &o);
            let deduped = dedup_fastest(&scored);
            prop_assert_eq!(deduped.len(), sizes.len());
            let total: f64 = deduped.iter().map(|d| d.confidence).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let mut last = usize::MAX;
            for step in 0..=20 {
                let kept = filter_threshold(&deduped, step as f64 * 0.05).kept.len();
                prop_assert!(kept <= last);
                last = kept;
            }
        }
    }
}
