use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error for pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("benchmark data error: {0}")]
    Data(String),

    #[error("failed to parse {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(#[from] SchemaError),

    #[error(transparent)]
    Gateway(#[from] crate::llm::GatewayError),

    #[error("sqlite error on {path}: {source}")]
    Sqlite {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },

    #[error("schema linking failed: {0}")]
    Linking(String),

    #[error("candidate generation failed: {0}")]
    Generation(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("{unanswered} of {total} examples unanswered, above the {limit_pct}% budget")]
    UnansweredBudget {
        unanswered: usize,
        total: usize,
        limit_pct: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the command line front end:
    /// 1 usage/config, 2 data, 3 backend failure budget exceeded.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Gateway(_) | Error::UnansweredBudget { .. } => 3,
            _ => 2,
        }
    }
}

/// Violations of the schema invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("duplicate table name `{0}`")]
    DuplicateTable(String),
    #[error("duplicate column `{column}` in table `{table}`")]
    DuplicateColumn { table: String, column: String },
    #[error("table `{0}` has no columns")]
    EmptyTable(String),
    #[error("empty column name in table `{0}`")]
    EmptyColumnName(String),
    #[error("foreign key endpoint `{0}` does not exist")]
    DanglingForeignKey(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{table}.{column}`")]
    UnknownColumn { table: String, column: String },
    #[error("linked schema is for `{found}`, expected `{expected}`")]
    WrongDatabase { expected: String, found: String },
    #[error("linked table `{0}` has no columns")]
    EmptyLinkedTable(String),
}
