use rusqlite::types::ValueRef;
use rusqlite::Connection;

use super::schema::{DbSchema, TableDef};
use crate::error::{Error, Result};
use crate::linking::LinkedSchema;
use crate::util::{derive_seed, shuffled};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableOrder {
    /// Metadata declaration order.
    Declared,
    /// Deterministic permutation of the declaration order.
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub order: TableOrder,
    /// Also permute columns inside each table line (column-linking prompts).
    pub shuffle_columns: bool,
    /// Render `name: type` instead of bare names (question-masking prompts).
    pub with_types: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            order: TableOrder::Declared,
            shuffle_columns: false,
            with_types: false,
        }
    }
}

/// Tables of `schema` retained by `linked` (all when absent), each with
/// its retained columns, in declaration order.
pub(crate) fn retained<'a>(schema: &'a DbSchema, linked: Option<&LinkedSchema>) -> Vec<(&'a TableDef, Vec<&'a str>)> {
    schema
        .tables
        .iter()
        .filter_map(|t| {
            let cols: Vec<&str> = match linked {
                None => t.columns.iter().map(|c| c.name.as_str()).collect(),
                Some(l) => {
                    let keep = l.columns_of(&t.name)?;
                    t.columns
                        .iter()
                        .filter(|c| keep.iter().any(|k| k.eq_ignore_ascii_case(&c.name)))
                        .map(|c| c.name.as_str())
                        .collect()
                }
            };
            Some((t, cols))
        })
        .collect()
}

/// Schema block used by every prompt: `# table ( col, ... )` lines, then
/// a lone `#` and `# t1.c1 = t2.c2` foreign-key lines when any foreign key
/// has both endpoints retained.
pub fn render_schema(schema: &DbSchema, linked: Option<&LinkedSchema>, order: TableOrder) -> String {
    render_schema_with(
        schema,
        linked,
        &RenderOptions {
            order,
            ..RenderOptions::default()
        },
    )
}

pub fn render_schema_with(schema: &DbSchema, linked: Option<&LinkedSchema>, opts: &RenderOptions) -> String {
    let mut tables = retained(schema, linked);
    if let TableOrder::Seeded(seed) = opts.order {
        tables = shuffled(&tables, seed);
    }
    let mut lines = Vec::with_capacity(tables.len() + 4);
    for (table, cols) in &tables {
        let mut cols = cols.clone();
        if opts.shuffle_columns {
            if let TableOrder::Seeded(seed) = opts.order {
                cols = shuffled(&cols, derive_seed(seed, &table.name, "columns", 0));
            }
        }
        let rendered: Vec<String> = cols
            .iter()
            .map(|c| {
                if opts.with_types {
                    let ty = table.column(c).map(|d| d.declared_type.to_lowercase()).unwrap_or_default();
                    format!("{c}: {ty}")
                } else {
                    (*c).to_string()
                }
            })
            .collect();
        lines.push(format!("# {} ( {} )", table.name, rendered.join(", ")));
    }
    let kept = |table: &str, column: &str| {
        tables.iter().any(|(t, cols)| {
            t.name.eq_ignore_ascii_case(table) && cols.iter().any(|c| c.eq_ignore_ascii_case(column))
        })
    };
    let fk_lines: Vec<String> = schema
        .foreign_keys
        .iter()
        .filter(|fk| kept(&fk.from.table, &fk.from.column) && kept(&fk.to.table, &fk.to.column))
        .map(|fk| format!("# {} = {}", fk.from, fk.to))
        .collect();
    if !fk_lines.is_empty() {
        lines.push("#".to_string());
        lines.extend(fk_lines);
    }
    lines.join("\n")
}

/// `# [table]` headers followed by `- column (type): description` lines,
/// restricted to retained columns; blocks separated by a blank line.
pub fn render_column_descriptions(schema: &DbSchema, linked: Option<&LinkedSchema>) -> String {
    let blocks: Vec<String> = retained(schema, linked)
        .into_iter()
        .map(|(table, cols)| {
            let mut block = format!("# [{}]", table.name);
            for c in cols {
                let def = table.column(c).expect("retained column exists");
                block.push_str(&format!("\n- {} ({})", def.name, def.declared_type.to_lowercase()));
                if !def.description.trim().is_empty() {
                    block.push_str(&format!(": {}", def.description.trim()));
                }
            }
            block
        })
        .collect();
    blocks.join("\n\n")
}

/// `# [table]` followed by CSV sample rows per retained table. Each CSV
/// body ends with a newline; blocks are separated by one blank line.
pub fn render_sample_rows(
    conn: &Connection,
    schema: &DbSchema,
    linked: Option<&LinkedSchema>,
    max_rows: usize,
) -> Result<String> {
    let mut blocks = Vec::new();
    for (table, cols) in retained(schema, linked) {
        let csv = sample_columns_csv(conn, &table.name, &cols, max_rows)?;
        blocks.push(format!("# [{}]\n{csv}", table.name));
    }
    Ok(blocks.join("\n"))
}

/// Header plus up to `max_rows` rows of every column of `table`.
pub fn sample_table_csv(conn: &Connection, table: &str, max_rows: usize) -> Result<String> {
    let columns: Vec<String> = {
        let mut stmt = conn
            .prepare("SELECT name FROM pragma_table_info(?1) ORDER BY cid")
            .map_err(|e| sqlite_err(conn, e))?;
        let rows = stmt.query_map([table], |r| r.get(0)).map_err(|e| sqlite_err(conn, e))?;
        rows.collect::<rusqlite::Result<_>>().map_err(|e| sqlite_err(conn, e))?
    };
    if columns.is_empty() {
        return Err(sqlite_err(
            conn,
            rusqlite::Error::InvalidParameterName(format!("no such table: {table}")),
        ));
    }
    let refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    sample_columns_csv(conn, table, &refs, max_rows)
}

/// Header plus up to `max_rows` rows of the given columns, in rowid order
/// (storage order for WITHOUT ROWID tables). NULL renders as an empty field.
pub fn sample_columns_csv(conn: &Connection, table: &str, columns: &[&str], max_rows: usize) -> Result<String> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(columns).map_err(csv_err)?;
    if max_rows > 0 {
        let select_list: Vec<String> = columns.iter().map(|c| quote_ident(c)).collect();
        let base = format!("SELECT {} FROM {}", select_list.join(", "), quote_ident(table));
        let ordered = format!("{base} ORDER BY rowid LIMIT {max_rows}");
        let unordered = format!("{base} LIMIT {max_rows}");
        let mut stmt = match conn.prepare(&ordered) {
            Ok(stmt) => stmt,
            Err(_) => conn.prepare(&unordered).map_err(|e| sqlite_err(conn, e))?,
        };
        let mut rows = stmt.query([]).map_err(|e| sqlite_err(conn, e))?;
        while let Some(row) = rows.next().map_err(|e| sqlite_err(conn, e))? {
            let mut record = Vec::with_capacity(columns.len());
            for i in 0..columns.len() {
                let value = row.get_ref(i).map_err(|e| sqlite_err(conn, e))?;
                record.push(csv_field(value));
            }
            writer.write_record(&record).map_err(csv_err)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn csv_field(value: ValueRef<'_>) -> String {
    match value {
        ValueRef::Null => String::new(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(r) => r.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => format!("X'{}'", hex::encode(b)),
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv encoding failed: {e}"))
}

fn sqlite_err(conn: &Connection, source: rusqlite::Error) -> Error {
    Error::Sqlite {
        path: conn.path().map(Into::into).unwrap_or_default(),
        source,
    }
}
