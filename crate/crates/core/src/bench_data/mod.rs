//! Benchmark ingestion and the schema text formats used in prompts.

mod loader;
mod render;
mod schema;

pub use loader::{introspect_schema, load_benchmark, open_read_only, Benchmark, Split};
pub use render::{
    render_column_descriptions, render_sample_rows, render_schema, render_schema_with,
    sample_columns_csv, sample_table_csv, RenderOptions, TableOrder,
};
pub use schema::{BenchmarkExample, ColumnDef, ColumnRef, DbSchema, Difficulty, ForeignKey, TableDef};

use crate::sql_text::{extract_identifiers, Identifiers};

/// Tables and `table.column` names a gold query references, in schema
/// spelling. Best effort; unresolvable tokens are ignored.
pub fn extract_gold_identifiers(sql: &str, schema: &DbSchema) -> Identifiers {
    extract_identifiers(sql, schema)
}
