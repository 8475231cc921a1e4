//! Multi-prompt text-to-SQL engine.
//!
//! The pipeline runs in three steps per question: schema linking over
//! several shuffled prompts, candidate generation from several few-shot
//! prompt variants, and execution-based filtering followed by a
//! multiple-choice selection vote. The [`eval`] module scores the chosen
//! queries with execution accuracy, valid efficiency score and
//! schema-linking recall.
//!
//! Everything that talks to a model goes through [`llm::Gateway`], which
//! can be backed by an OpenAI-compatible HTTP endpoint or by replay
//! fixtures for fully deterministic offline runs.

pub mod bench_data;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fewshot;
pub mod generate;
pub mod linking;
pub mod llm;
pub mod pipeline;
pub mod select;
pub mod sql_text;
#[cfg(test)]
mod testutil;
mod util;

pub use bench_data::{BenchmarkExample, ColumnDef, DbSchema, Difficulty, ForeignKey, TableDef};
pub use config::{Backend, RunConfig};
pub use error::{Error, Result};
pub use exec::{ExecStatus, ExecutionOutcome, Executor, ResultFingerprint};
pub use fewshot::{ExampleIndex, FewShotList, MaskedQuestion};
pub use generate::CandidateQuery;
pub use linking::{LinkedSchema, LinkingTrace};
pub use select::{ScoredCandidate, SelectionResult};
