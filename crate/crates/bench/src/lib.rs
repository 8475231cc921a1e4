//! Synthetic inputs for the selection and retrieval benchmarks.

use mcs_sql::exec::{normalize_and_fingerprint, Cell, ResultSemantics};
use mcs_sql::fewshot::{IndexEntry, INDEX_FORMAT_VERSION};
use mcs_sql::llm::EmbeddingVector;
use mcs_sql::{CandidateQuery, ExampleIndex, ExecStatus, ExecutionOutcome, MaskedQuestion};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A candidate pool of `prompts * samples` queries spread over `groups`
/// distinct results, with roughly one in ten failing to execute.
pub fn pool(prompts: usize, samples: usize, groups: usize, seed: u64) -> (Vec<CandidateQuery>, Vec<ExecutionOutcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fingerprints: Vec<_> = (0..groups.max(1))
        .map(|g| normalize_and_fingerprint(&[vec![Cell::Int(g as i64)]], ResultSemantics::Multiset))
        .collect();
    let mut candidates = Vec::with_capacity(prompts * samples);
    let mut outcomes = Vec::with_capacity(prompts * samples);
    for p in 0..prompts {
        for s in 0..samples {
            // Skewed toward low group ids, like a real majority answer.
            let g = (rng.random::<f64>().powi(3) * fingerprints.len() as f64) as usize;
            candidates.push(CandidateQuery {
                sql: format!("SELECT {g} FROM t WHERE p = {p} AND s = {s}"),
                prompt_index: p,
                sample_index: s,
                reasoning: String::new(),
            });
            outcomes.push(if rng.random_range(0..10) == 0 {
                ExecutionOutcome {
                    status: ExecStatus::RuntimeError,
                    fingerprint: None,
                    row_count: None,
                    exec_time_ms: None,
                    error: Some("no such column".into()),
                }
            } else {
                ExecutionOutcome {
                    status: ExecStatus::Ok,
                    fingerprint: Some(fingerprints[g]),
                    row_count: Some(1),
                    exec_time_ms: Some(rng.random_range(0.1..5.0)),
                    error: None,
                }
            });
        }
    }
    (candidates, outcomes)
}

pub fn random_vector(rng: &mut ChaCha8Rng, dimension: usize) -> EmbeddingVector {
    let values = (0..dimension).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingVector::normalized(values).expect("non-zero vector")
}

/// An index of `size` training examples with random unit vectors.
pub fn index(size: usize, dimension: usize, seed: u64) -> ExampleIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..size)
        .map(|i| {
            let question = format!("question {i}");
            IndexEntry {
                example_id: format!("{i:06}"),
                db_id: format!("db{}", i % 50),
                masked: MaskedQuestion::unmasked(&question, "synthetic"),
                question,
                evidence: None,
                gold_sql: format!("SELECT {i}"),
                question_vec: random_vector(&mut rng, dimension),
                masked_vec: random_vector(&mut rng, dimension),
            }
        })
        .collect();
    ExampleIndex {
        version: INDEX_FORMAT_VERSION,
        embedding_model: "synthetic".into(),
        dimension,
        entries,
    }
}
