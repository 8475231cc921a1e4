use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ExecutionOutcome, ResultSemantics, TimingMode};
use crate::fewshot::{FewShotList, MaskedQuestion};
use crate::generate::Generation;
use crate::linking::{LinkedSchema, LinkingTrace};
use crate::select::{ScoredCandidate, SelectionResult};
use crate::util::{read_json, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub example_id: String,
    /// `None` when linking failed and the full-schema fallback is off.
    pub linked: Option<LinkedSchema>,
    /// Linking was disabled; `linked` is the full schema.
    pub skipped: bool,
    pub full_schema_fallback: bool,
    pub all_tables_fallback: bool,
    pub all_columns_fallback: Vec<String>,
    pub forced_columns: Vec<String>,
    pub traces: Vec<LinkingTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<MaskedQuestion>,
    pub variants: Vec<FewShotList>,
    pub generation: Option<Generation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Execution outcomes of one example's candidates, aligned with
/// `GenerateRecord::generation.candidates`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRecord {
    pub example_id: String,
    pub timeout_ms: u64,
    pub timing: TimingMode,
    pub semantics: ResultSemantics,
    pub outcomes: Vec<ExecutionOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRecord {
    pub example_id: String,
    pub db_id: String,
    pub threshold: f64,
    pub use_filtering: bool,
    /// Candidates left after deduplication and filtering.
    pub filtered: Vec<ScoredCandidate>,
    pub result: SelectionResult,
}

const BIRD_SEPARATOR: &str = "\t----- bird -----\t";

/// Predictions in the BIRD submission format: example id to
/// `"<sql>\t----- bird -----\t<db_id>"`. Unanswered examples carry an
/// empty query.
pub fn write_predictions(path: &Path, predictions: &[(String, String, Option<String>)]) -> Result<()> {
    let map: BTreeMap<&str, String> = predictions
        .iter()
        .map(|(id, db, sql)| {
            (id.as_str(), format!("{}{BIRD_SEPARATOR}{db}", sql.as_deref().unwrap_or("")))
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&map)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Option<String>>> {
    if !path.exists() {
        return Err(Error::Prerequisite(format!("no predictions at {}", path.display())));
    }
    let map: BTreeMap<String, String> = read_json(path)?;
    Ok(map
        .into_iter()
        .map(|(id, entry)| {
            let sql = entry.split(BIRD_SEPARATOR).next().unwrap_or("").trim().to_string();
            (id, Some(sql).filter(|s| !s.is_empty()))
        })
        .collect())
}
