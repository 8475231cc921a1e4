use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SchemaError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    /// Case-insensitive column lookup.
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

/// `from` references `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from: ColumnRef,
    pub to: ColumnRef,
}

/// Tables, typed columns and foreign keys of one benchmark database.
///
/// Table order is the declaration order from the benchmark metadata and is
/// what prompts use when no shuffle is requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl DbSchema {
    pub fn new(
        db_id: impl Into<String>,
        tables: Vec<TableDef>,
        foreign_keys: Vec<ForeignKey>,
    ) -> Result<Self, SchemaError> {
        let schema = DbSchema {
            db_id: db_id.into(),
            tables,
            foreign_keys,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_lowercase()) {
                return Err(SchemaError::DuplicateTable(table.name.clone()));
            }
            if table.columns.is_empty() {
                return Err(SchemaError::EmptyTable(table.name.clone()));
            }
            let mut cols = HashSet::new();
            for col in &table.columns {
                if col.name.is_empty() {
                    return Err(SchemaError::EmptyColumnName(table.name.clone()));
                }
                if !cols.insert(col.name.to_lowercase()) {
                    return Err(SchemaError::DuplicateColumn {
                        table: table.name.clone(),
                        column: col.name.clone(),
                    });
                }
            }
        }
        for fk in &self.foreign_keys {
            for end in [&fk.from, &fk.to] {
                if self.resolve_column(&end.table, &end.column).is_none() {
                    return Err(SchemaError::DanglingForeignKey(end.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Case-insensitive table lookup.
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Canonical spelling of `table.column`, if both exist.
    pub fn resolve_column(&self, table: &str, column: &str) -> Option<ColumnRef> {
        let t = self.table(table)?;
        let c = t.column(column)?;
        Some(ColumnRef {
            table: t.name.clone(),
            column: c.name.clone(),
        })
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.iter().map(|t| t.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    Easy,
    Medium,
    Hard,
    #[serde(alias = "extra", alias = "extra hard", alias = "extra-hard")]
    ExtraHard,
    Unknown,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::ExtraHard => "extra_hard",
            Difficulty::Unknown => "unknown",
        }
    }

    pub fn parse_label(label: &str) -> Difficulty {
        match label.trim().to_lowercase().replace(['-', ' '], "_").as_str() {
            "simple" => Difficulty::Simple,
            "moderate" => Difficulty::Moderate,
            "challenging" => Difficulty::Challenging,
            "easy" => Difficulty::Easy,
            "medium" => Difficulty::Medium,
            "hard" => Difficulty::Hard,
            "extra" | "extra_hard" => Difficulty::ExtraHard,
            _ => Difficulty::Unknown,
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkExample {
    pub example_id: String,
    pub db_id: String,
    pub question: String,
    pub evidence: Option<String>,
    pub gold_sql: String,
    pub difficulty: Difficulty,
}

impl BenchmarkExample {
    /// Evidence text if present and not blank.
    pub fn evidence(&self) -> Option<&str> {
        self.evidence.as_deref().map(str::trim).filter(|e| !e.is_empty())
    }
}
