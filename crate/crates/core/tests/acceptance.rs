//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the output.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mcs_sql::eval::score_examples;
use mcs_sql::exec::{ResultSemantics, TimingMode};
use mcs_sql::fewshot::{select_examples, IndexEntry, Strategy, INDEX_FORMAT_VERSION};
use mcs_sql::llm::EmbeddingVector;
use mcs_sql::pipeline::{Pipeline, Stage};
use mcs_sql::select::{dedup_fastest, filter_threshold, score_pool, FallbackReason, SelectionResult};
use mcs_sql::{BenchmarkExample, Difficulty, ExampleIndex, Executor, MaskedQuestion, RunConfig};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;

use common::*;

const POOLS: usize = 1_000;

fn conservation() -> Duration {
    let pools = random_pools(POOLS, 1);
    let start = Instant::now();
    for (i, pool) in pools.iter().enumerate() {
        let scored = score_pool(&pool.candidates, &pool.outcomes);
        let stats = group_stats(pool);
        let executable: usize = stats.values().map(|(n, _)| n).sum();
        assert_eq!(scored.len(), executable, "pool {i}");
        if executable == 0 {
            continue;
        }
        let mut per_group: HashMap<_, f64> = HashMap::new();
        for c in &scored {
            per_group.insert(c.fingerprint(), c.confidence);
        }
        for (g, (n, _)) in &stats {
            let conf = per_group[&group_fingerprint(*g)];
            assert_eq!(conf, *n as f64 / executable as f64, "pool {i} group {g}");
        }
        let total: f64 = per_group.values().sum();
        assert!((total - 1.0).abs() <= 1e-9, "pool {i}: sum {total}");
    }
    start.elapsed()
}

fn fastest_per_group() -> Duration {
    let pools = random_pools(POOLS, 1);
    let start = Instant::now();
    for (i, pool) in pools.iter().enumerate() {
        let deduped = dedup_fastest(&score_pool(&pool.candidates, &pool.outcomes));
        let stats = group_stats(pool);
        assert_eq!(deduped.len(), stats.len(), "pool {i}");
        let seen: BTreeSet<_> = deduped.iter().map(|c| c.fingerprint().to_hex()).collect();
        assert_eq!(seen.len(), stats.len(), "pool {i}: duplicate group kept");
        for c in &deduped {
            let g: usize = c.query.sql.trim_start_matches("SELECT ").parse().unwrap();
            let group = pool.groups[g].unwrap();
            assert_eq!(c.exec_time_ms(), stats[&group].1, "pool {i} group {group}");
        }
    }
    start.elapsed()
}

fn threshold_monotonicity() -> Duration {
    let pools = random_pools(POOLS, 1);
    let start = Instant::now();
    let sweep: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for (i, pool) in pools.iter().enumerate() {
        let deduped = dedup_fastest(&score_pool(&pool.candidates, &pool.outcomes));
        assert_eq!(filter_threshold(&deduped, 0.0).kept, deduped, "pool {i}: T=0 not identity");
        let sizes: Vec<usize> = sweep.iter().map(|t| filter_threshold(&deduped, *t).kept.len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "pool {i}: {sizes:?}");
    }

    // 12, 5 and 3 of 20 samples: confidences 0.60, 0.25, 0.15.
    let groups: Vec<Option<usize>> = [0; 12].into_iter().chain([1; 5]).chain([2; 3]).map(Some).collect();
    let times = vec![1.0; 20];
    let pool = pool_from_groups(&groups, &times);
    let deduped = dedup_fastest(&score_pool(&pool.candidates, &pool.outcomes));
    let filtered = filter_threshold(&deduped, 0.2);
    let kept: Vec<f64> = filtered.kept.iter().map(|c| c.confidence).collect();
    assert_eq!(kept, [0.6, 0.25]);
    assert!(!filtered.below_threshold_fallback);
    start.elapsed()
}

fn equivalence_oracle() -> Duration {
    let start = Instant::now();
    let exec = Executor::new(5_000, TimingMode::Wall, ResultSemantics::Multiset);
    let db = |id: &str| desk_dir().join(format!("benchmark/database/{id}/{id}.sqlite"));
    assert!(EQUIVALENCE_SUITE.len() >= 20);
    let mut agree = 0;
    for (db_id, a, b, equal) in EQUIVALENCE_SUITE {
        let (ra, rb) = (exec.execute(&db(db_id), a), exec.execute(&db(db_id), b));
        assert!(ra.is_ok() && rb.is_ok(), "{a} / {b} failed to run");
        if (ra.fingerprint == rb.fingerprint) == *equal {
            agree += 1;
        } else {
            panic!("wrong verdict for `{a}` vs `{b}`");
        }
    }
    assert_eq!(agree, EQUIVALENCE_SUITE.len());
    start.elapsed()
}

fn raw_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn retrieval_oracle() -> Duration {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 32;
    let mut raw: Vec<Vec<f32>> = (0..200)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    // Exact duplicates under other ids force the id tie-break.
    for i in 0..20 {
        raw[180 + i] = raw[i].clone();
    }
    let ids: Vec<String> = (0..200).map(|i| format!("ex{:03}", (i * 37) % 200)).collect();
    let entries = raw
        .iter()
        .zip(&ids)
        .map(|(v, id)| IndexEntry {
            example_id: id.clone(),
            db_id: "db".into(),
            question: id.clone(),
            evidence: None,
            gold_sql: "SELECT 1".into(),
            masked: MaskedQuestion::unmasked(id, "fixture"),
            question_vec: EmbeddingVector::normalized(v.clone()).unwrap(),
            masked_vec: EmbeddingVector::normalized(v.iter().rev().copied().collect()).unwrap(),
        })
        .collect();
    let index = ExampleIndex {
        version: INDEX_FORMAT_VERSION,
        embedding_model: "fixture".into(),
        dimension: dim,
        entries,
    };
    let mut queries: Vec<Vec<f32>> = (0..40)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    queries.extend(raw[..10].iter().cloned());

    let start = Instant::now();
    for (qi, q) in queries.iter().enumerate() {
        let query = EmbeddingVector::normalized(q.clone()).unwrap();
        for strategy in [Strategy::Question, Strategy::Masked] {
            for k in [1, 5, 20] {
                for exclude in [None, Some(ids[qi % 200].as_str())] {
                    let mut brute: Vec<(f64, &str)> = raw
                        .iter()
                        .zip(&ids)
                        .filter(|(_, id)| exclude != Some(id.as_str()))
                        .map(|(v, id)| {
                            let target: Vec<f32> = match strategy {
                                Strategy::Question => v.clone(),
                                Strategy::Masked => v.iter().rev().copied().collect(),
                            };
                            (raw_cosine(q, &target), id.as_str())
                        })
                        .collect();
                    brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
                    let want: Vec<&str> = brute.iter().take(k).map(|(_, id)| *id).collect();
                    let got: Vec<String> = select_examples(&index, &query, strategy, k, exclude)
                        .into_iter()
                        .map(|r| r.example_id)
                        .collect();
                    assert_eq!(got, want, "query {qi} k {k} {strategy:?} exclude {exclude:?}");
                }
            }
        }
    }
    start.elapsed()
}

fn tables_of(record: &serde_json::Value) -> Vec<(usize, BTreeSet<String>)> {
    record["traces"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["stage"] == "table")
        .map(|t| {
            let names = t["responses"]
                .as_array()
                .unwrap()
                .iter()
                .flat_map(|r| r.as_array().unwrap().iter().map(|n| n.as_str().unwrap().to_string()))
                .collect();
            (t["prompt_index"].as_u64().unwrap() as usize, names)
        })
        .collect()
}

fn linking_union() -> Duration {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut multi = Pipeline::create(desk_config(), None, None, Some(&dir.path().join("multi"))).unwrap();
    multi.run_stage(Stage::Link).unwrap();
    for entry in std::fs::read_dir(dir.path().join("multi/link")).unwrap() {
        let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(entry.unwrap().path()).unwrap()).unwrap();
        let per_prompt = tables_of(&record);
        let union: BTreeSet<String> = per_prompt.iter().flat_map(|(_, t)| t.clone()).collect();
        let linked: BTreeSet<String> = record["linked"]["tables"].as_object().unwrap().keys().cloned().collect();
        for (i, tables) in &per_prompt {
            assert!(tables.is_subset(&union), "{}: prompt {i}", record["example_id"]);
        }
        assert!(union.is_subset(&linked), "{}: linked tables lost part of the union", record["example_id"]);
    }

    // Only the third table prompt of dev 2 names `bond`.
    let only = ["2".to_string()];
    let recall = |p_t: usize, name: &str| {
        let mut config = desk_config();
        config.table_prompts = p_t;
        let mut p = Pipeline::create(config, None, Some(&only), Some(&dir.path().join(name))).unwrap();
        p.run_all().unwrap().linking_table_recall.unwrap()
    };
    let with_three = recall(3, "p3");
    let with_one = recall(1, "p1");
    assert_eq!(with_three, 100.0);
    assert!(with_one < 100.0, "single prompt recall {with_one}");
    start.elapsed()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn replay_determinism(runs: &Path) -> Duration {
    let start = Instant::now();
    let expected = desk_expected()["ex_overall"].as_f64().unwrap();
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let mut p = Pipeline::create(desk_config(), None, None, Some(&runs.join(name))).unwrap();
        assert!(p.examples().len() >= 10);
        let dbs: BTreeSet<&str> = p.examples().iter().map(|e| e.db_id.as_str()).collect();
        assert_eq!(dbs.len(), 2);
        let report = p.run_all().unwrap();
        assert_eq!(report.ex_overall, expected);
        p.check_budget(&report).unwrap();
        let mut files = files_under(&runs.join(name));
        // holds timestamps and the run's own path
        files.remove(Path::new("manifest.json"));
        outputs.push(files);
    }
    let elapsed = start.elapsed();
    assert!(outputs[0].len() > 40);
    assert_eq!(outputs[0].keys().collect::<Vec<_>>(), outputs[1].keys().collect::<Vec<_>>());
    for (path, bytes) in &outputs[0] {
        assert!(bytes == &outputs[1][path], "{} differs between runs", path.display());
    }
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
    elapsed
}

fn prompt_conformance() -> Duration {
    let start = Instant::now();
    for (name, prompt) in molecule_bond_prompts() {
        if let Some(diff) = first_difference(&normalize_shuffle(&golden(name)), &normalize_shuffle(&prompt)) {
            panic!("{name}: {diff}");
        }
    }
    start.elapsed()
}

fn ves_behaviour() -> Duration {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("big.sqlite");
    let conn = Connection::open(&db).unwrap();
    conn.execute_batch(
        "CREATE TABLE t (a INTEGER, b INTEGER);
         WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM n WHERE i < 100000)
         INSERT INTO t SELECT i, i % 97 FROM n;
         CREATE INDEX t_a ON t(a);",
    )
    .unwrap();
    drop(conn);
    let example = |id: &str, gold: &str| BenchmarkExample {
        example_id: id.into(),
        db_id: "big".into(),
        question: String::new(),
        evidence: None,
        gold_sql: gold.into(),
        difficulty: Difficulty::Simple,
    };
    let examples = vec![
        example("same", "SELECT COUNT(*) FROM t WHERE b = 3"),
        example("wrong", "SELECT COUNT(*) FROM t WHERE b = 3"),
        // full scan for the gold, index lookup for the prediction
        example("slow_gold", "SELECT MAX(a + 0) FROM t"),
    ];
    let predictions: BTreeMap<String, Option<String>> = [
        ("same", "SELECT COUNT(*) FROM t WHERE b = 3"),
        ("wrong", "SELECT COUNT(*) FROM t WHERE b = 95"),
        ("slow_gold", "SELECT MAX(a) FROM t"),
    ]
    .into_iter()
    .map(|(id, sql)| (id.to_string(), Some(sql.to_string())))
    .collect();
    let db_paths = BTreeMap::from([("big".to_string(), db)]);
    let config = RunConfig {
        timing: TimingMode::VmSteps,
        ves_repeats: 3,
        ..RunConfig::desk()
    };
    let verdicts = score_examples(&predictions, &examples, &db_paths, &config);
    let reward = |id: &str| verdicts.iter().find(|v| v.example_id == id).unwrap().reward;
    assert_eq!(reward("same"), 1.0);
    assert_eq!(reward("wrong"), 0.0);
    assert!(reward("slow_gold") > 1.0, "reward {}", reward("slow_gold"));
    start.elapsed()
}

fn selection_fallbacks(runs: &Path) -> Duration {
    let start = Instant::now();
    let result = |id: &str| -> SelectionResult {
        let path = runs.join("first/select").join(format!("{id}.json"));
        let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        serde_json::from_value(record["result"].clone()).unwrap()
    };
    let sizes = |r: &SelectionResult| (r.pool_sizes.raw, r.pool_sizes.executable, r.pool_sizes.deduped, r.pool_sizes.filtered);

    // Every sample unparseable: nothing to execute.
    let r = result("4");
    assert_eq!(r.fallback_reason, Some(FallbackReason::EmptyPool));
    assert_eq!((r.final_sql.as_deref(), sizes(&r), r.votes_cast), (None, (0, 0, 0, 0), 0));
    // Every candidate fails to execute.
    let r = result("8");
    assert_eq!(r.fallback_reason, Some(FallbackReason::EmptyPool));
    assert_eq!((r.final_sql.as_deref(), sizes(&r), r.votes_cast), (None, (100, 0, 0, 0), 0));

    let r = result("1");
    assert_eq!(r.fallback_reason, Some(FallbackReason::SingleCandidate));
    assert_eq!(sizes(&r), (100, 100, 1, 1));
    assert_eq!(r.final_sql.as_deref(), Some("SELECT label FROM molecule WHERE molecule_id = 'TR000'"));
    assert_eq!(r.votes_cast, 0);

    // Seven result groups, none at 0.2: the best one is kept alone.
    let r = result("5");
    assert_eq!(r.fallback_reason, Some(FallbackReason::BelowThresholdFallback));
    assert_eq!(sizes(&r), (100, 100, 7, 1));
    assert_eq!(r.final_sql.as_deref(), Some("SELECT COUNT(bond_id) FROM bond WHERE molecule_id = 'TR000'"));
    assert_eq!(r.votes_cast, 0);

    // Votes name none of the listed queries: the top-confidence one wins.
    let r = result("7");
    assert_eq!(r.fallback_reason, Some(FallbackReason::NoVoteMatch));
    assert_eq!(sizes(&r), (100, 100, 2, 2));
    assert_eq!(r.votes_cast, 20);
    assert_eq!(r.votes_matched, 0);
    assert!(r.final_sql.as_deref().unwrap().contains("ORDER BY SUM(T2.points) DESC LIMIT 1"));
    assert!(r.vote_tally.iter().all(|v| v.votes == 0));
    start.elapsed()
}

fn check(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Duration) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let (ok, detail) = match outcome {
        Ok(elapsed) => match limit {
            Some(limit) if elapsed >= limit => (false, format!("{:.2}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())),
            _ => (true, format!("{:.2}s", elapsed.as_secs_f64())),
        },
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            (false, msg)
        }
    };
    println!("{} {id:>2} {name:<34} {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() -> ExitCode {
    // failures are reported on their PASS/FAIL line
    std::panic::set_hook(Box::new(|_| {}));
    let runs = tempfile::tempdir().unwrap();
    let secs = |s| Some(Duration::from_secs(s));
    let results = [
        check(1, "confidence conservation", secs(5), conservation),
        check(2, "fastest per result group", secs(5), fastest_per_group),
        check(3, "threshold monotonicity", None, threshold_monotonicity),
        check(4, "execution equivalence oracle", secs(10), equivalence_oracle),
        check(5, "few-shot retrieval oracle", secs(5), retrieval_oracle),
        check(6, "schema linking union", None, linking_union),
        check(7, "end-to-end replay determinism", secs(60), || replay_determinism(runs.path())),
        check(8, "prompt conformance", None, prompt_conformance),
        check(9, "efficiency reward", None, ves_behaviour),
        check(10, "selection fallbacks", None, || selection_fallbacks(runs.path())),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
