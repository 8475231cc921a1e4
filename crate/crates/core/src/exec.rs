//! Read-only query execution against SQLite benchmark databases.
//!
//! Every query runs on its own read-only connection with a deadline
//! enforced through SQLite's progress handler. Results are reduced to a
//! [`ResultFingerprint`]: a SHA-256 over the canonicalized, sorted rows, so
//! two queries "return the same result" exactly when their fingerprints
//! match.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags, StatementStatus};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sql_text;

/// Version of the cell canonicalization folded into every digest.
pub const NORMALIZATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    /// The statement did not compile (bad syntax, unknown table or column)
    /// or is not a read-only query.
    SyntaxError,
    RuntimeError,
    Timeout,
}

/// How execution time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Wall-clock milliseconds.
    Wall,
    /// SQLite virtual machine steps of the statement, reported at a
    /// nominal 1 µs per step. Deterministic, so it doubles as a stub clock.
    VmSteps,
}

/// Whether duplicate rows matter when comparing results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultSemantics {
    Multiset,
    Set,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResultFingerprint {
    pub digest: [u8; 32],
    pub normalization_version: u32,
}

impl ResultFingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

impl fmt::Debug for ResultFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ResultFingerprint({}…, v{})", &self.to_hex()[..12], self.normalization_version)
    }
}

impl PartialOrd for ResultFingerprint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ResultFingerprint {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.normalization_version, self.digest).cmp(&(other.normalization_version, other.digest))
    }
}

impl Serialize for ResultFingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("v{}:{}", self.normalization_version, self.to_hex()))
    }
}

impl<'de> Deserialize<'de> for ResultFingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let text = String::deserialize(d)?;
        let (version, hex_digest) = text
            .strip_prefix('v')
            .and_then(|t| t.split_once(':'))
            .ok_or_else(|| D::Error::custom("fingerprint must look like v<version>:<hex>"))?;
        let mut digest = [0u8; 32];
        hex::decode_to_slice(hex_digest, &mut digest).map_err(D::Error::custom)?;
        Ok(ResultFingerprint {
            digest,
            normalization_version: version.parse().map_err(D::Error::custom)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    pub fingerprint: Option<ResultFingerprint>,
    pub row_count: Option<u64>,
    pub exec_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExecutionOutcome {
    fn failed(status: ExecStatus, error: impl Into<String>) -> Self {
        ExecutionOutcome {
            status,
            fingerprint: None,
            row_count: None,
            exec_time_ms: None,
            error: Some(error.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

/// One materialized result cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Int(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl From<ValueRef<'_>> for Cell {
    fn from(value: ValueRef<'_>) -> Self {
        match value {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Int(i),
            ValueRef::Real(r) => Cell::Real(r),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }
}

fn encode_cell(cell: &Cell, out: &mut Vec<u8>) {
    fn bytes(tag: u8, payload: &[u8], out: &mut Vec<u8>) {
        out.push(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    match cell {
        Cell::Null => out.push(0),
        Cell::Int(i) => bytes(1, i.to_string().as_bytes(), out),
        Cell::Real(r) => {
            // integral reals collapse onto integers
            if r.fract() == 0.0 && r.abs() < 9.007_199_254_740_992e15 {
                bytes(1, (*r as i64).to_string().as_bytes(), out);
            } else if r.is_finite() {
                let rounded = (r * 1e6).round() / 1e6;
                let text = format!("{rounded:.6}");
                let text = if text == "-0.000000" { "0.000000".to_string() } else { text };
                bytes(2, text.as_bytes(), out);
            } else {
                bytes(2, r.to_string().as_bytes(), out);
            }
        }
        Cell::Text(t) => bytes(3, t.as_bytes(), out),
        Cell::Blob(b) => bytes(4, b, out),
    }
}

/// Canonical digest of a result. Row order is ignored; column order
/// within a row is significant. Integral reals equal integers, other
/// reals compare after rounding to 6 decimals, text is byte-exact and
/// NULL is its own value.
pub fn normalize_and_fingerprint(rows: &[Vec<Cell>], semantics: ResultSemantics) -> ResultFingerprint {
    let mut encoded: Vec<Vec<u8>> = rows
        .iter()
        .map(|row| {
            let mut buf = Vec::with_capacity(row.len() * 8);
            buf.extend_from_slice(&(row.len() as u64).to_le_bytes());
            for cell in row {
                encode_cell(cell, &mut buf);
            }
            buf
        })
        .collect();
    encoded.sort_unstable();
    if semantics == ResultSemantics::Set {
        encoded.dedup();
    }
    let mut hasher = Sha256::new();
    hasher.update(NORMALIZATION_VERSION.to_le_bytes());
    hasher.update((encoded.len() as u64).to_le_bytes());
    for row in &encoded {
        hasher.update((row.len() as u64).to_le_bytes());
        hasher.update(row);
    }
    ResultFingerprint {
        digest: hasher.finalize().into(),
        normalization_version: NORMALIZATION_VERSION,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("timing failed: {0}")]
pub struct TimingError(pub String);

/// Runs read-only queries with a timeout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Executor {
    pub timeout: Duration,
    pub timing: TimingMode,
    pub semantics: ResultSemantics,
}

impl Executor {
    pub fn new(timeout_ms: u64, timing: TimingMode, semantics: ResultSemantics) -> Self {
        Executor {
            timeout: Duration::from_millis(timeout_ms),
            timing,
            semantics,
        }
    }

    pub fn from_config(config: &crate::RunConfig) -> Self {
        Executor::new(config.exec_timeout_ms, config.timing, config.result_semantics)
    }

    /// Executes `sql`; every failure is reported through the outcome status.
    pub fn execute(&self, db_path: &Path, sql: &str) -> ExecutionOutcome {
        match self.run(db_path, sql) {
            Ok((rows, time_ms)) => ExecutionOutcome {
                status: ExecStatus::Ok,
                fingerprint: Some(normalize_and_fingerprint(&rows, self.semantics)),
                row_count: Some(rows.len() as u64),
                exec_time_ms: Some(time_ms),
                error: None,
            },
            Err(outcome) => outcome,
        }
    }

    /// Median time over `repeats` runs; with two or more repeats the first
    /// run is a discarded warm-up.
    pub fn time_query(&self, db_path: &Path, sql: &str, repeats: usize) -> Result<f64, TimingError> {
        if repeats == 0 {
            return Err(TimingError("repeats must be at least 1".into()));
        }
        let runs = if repeats >= 2 { repeats + 1 } else { 1 };
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            match self.run(db_path, sql) {
                Ok((_, t)) => times.push(t),
                Err(outcome) => {
                    return Err(TimingError(outcome.error.unwrap_or_else(|| format!("{:?}", outcome.status))))
                }
            }
        }
        if repeats >= 2 {
            times.remove(0);
        }
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        Ok(if times.len() % 2 == 1 {
            times[mid]
        } else {
            (times[mid - 1] + times[mid]) / 2.0
        })
    }

    fn run(&self, db_path: &Path, sql: &str) -> Result<(Vec<Vec<Cell>>, f64), ExecutionOutcome> {
        let sql = match sql_text::normalize_single_statement(sql) {
            Ok(s) => s,
            Err(e) => return Err(ExecutionOutcome::failed(ExecStatus::SyntaxError, format!("{e:?}"))),
        };
        if !matches!(
            sql_text::leading_keyword(&sql).as_deref(),
            Some("SELECT") | Some("WITH") | Some("VALUES")
        ) {
            return Err(ExecutionOutcome::failed(
                ExecStatus::SyntaxError,
                "statement rejected: only read-only queries are executed",
            ));
        }
        let conn = Connection::open_with_flags(
            db_path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| ExecutionOutcome::failed(ExecStatus::RuntimeError, format!("cannot open database: {e}")))?;
        let _ = conn.pragma_update(None, "query_only", true);

        let start = Instant::now();
        let deadline = start + self.timeout;
        conn.progress_handler(1000, Some(move || Instant::now() >= deadline))
            .map_err(|e| ExecutionOutcome::failed(ExecStatus::RuntimeError, e.to_string()))?;

        let mut stmt = conn
            .prepare(&sql)
            .map_err(|e| ExecutionOutcome::failed(ExecStatus::SyntaxError, e.to_string()))?;
        if !stmt.readonly() {
            return Err(ExecutionOutcome::failed(
                ExecStatus::SyntaxError,
                "statement rejected: only read-only queries are executed",
            ));
        }
        let columns = stmt.column_count();
        let mut rows = Vec::new();
        {
            let mut cursor = stmt.raw_query();
            loop {
                match cursor.next() {
                    Ok(Some(row)) => {
                        let mut cells = Vec::with_capacity(columns);
                        for i in 0..columns {
                            let value = row
                                .get_ref(i)
                                .map_err(|e| ExecutionOutcome::failed(ExecStatus::RuntimeError, e.to_string()))?;
                            cells.push(Cell::from(value));
                        }
                        rows.push(cells);
                    }
                    Ok(None) => break,
                    Err(e) => return Err(classify_step_error(e, self.timeout)),
                }
            }
        }
        let elapsed = start.elapsed();
        let time_ms = match self.timing {
            TimingMode::Wall => elapsed.as_secs_f64() * 1000.0,
            TimingMode::VmSteps => f64::from(stmt.get_status(StatementStatus::VmStep).max(0)) / 1000.0,
        };
        Ok((rows, time_ms))
    }
}

fn classify_step_error(e: rusqlite::Error, timeout: Duration) -> ExecutionOutcome {
    if let rusqlite::Error::SqliteFailure(err, _) = &e {
        if err.code == ErrorCode::OperationInterrupted {
            return ExecutionOutcome::failed(
                ExecStatus::Timeout,
                format!("interrupted after {} ms", timeout.as_millis()),
            );
        }
    }
    ExecutionOutcome::failed(ExecStatus::RuntimeError, e.to_string())
}
