use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::schema::{BenchmarkExample, ColumnDef, ColumnRef, DbSchema, Difficulty, ForeignKey, TableDef};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One loaded benchmark split.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub root: PathBuf,
    pub split: Split,
    pub examples: Vec<BenchmarkExample>,
    pub schemas: BTreeMap<String, DbSchema>,
    pub db_paths: BTreeMap<String, PathBuf>,
    /// sha256 over the metadata files that were read.
    pub content_hash: String,
}

impl Benchmark {
    pub fn schema(&self, db_id: &str) -> Result<&DbSchema> {
        self.schemas
            .get(db_id)
            .ok_or_else(|| Error::Data(format!("unknown db_id `{db_id}`")))
    }

    pub fn db_path(&self, db_id: &str) -> Result<&Path> {
        self.db_paths
            .get(db_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Data(format!("no database file for db_id `{db_id}`")))
    }

    pub fn example(&self, example_id: &str) -> Option<&BenchmarkExample> {
        self.examples.iter().find(|e| e.example_id == example_id)
    }
}

/// Loads a split laid out like the public Spider/BIRD distributions.
///
/// Looked up under `root`, first match wins:
/// - examples: `<split>.json`, `<split>/<split>.json`, `<split>_spider.json`
/// - tables metadata: `<split>_tables.json`, `<split>/<split>_tables.json`, `tables.json`
///   (when absent, schemas are introspected from the SQLite files)
/// - databases: `<split>_databases/`, `<split>/<split>_databases/`, `database/`,
///   each holding `<db_id>/<db_id>.sqlite`
///
/// BIRD column descriptions are read from
/// `<db_id>/database_description/<table>.csv` when present, or from an
/// optional `column_descriptions` array parallel to `column_names_original`.
pub fn load_benchmark(root: &Path, split: Split) -> Result<Benchmark> {
    let s = split.as_str();
    let examples_path = first_existing(
        root,
        &[format!("{s}.json"), format!("{s}/{s}.json"), format!("{s}_spider.json")],
    )
    .ok_or_else(|| Error::Data(format!("no {s} examples file under {}", root.display())))?;
    let db_dir = first_existing(
        root,
        &[format!("{s}_databases"), format!("{s}/{s}_databases"), "database".to_string()],
    )
    .ok_or_else(|| Error::Data(format!("no database directory for split {s} under {}", root.display())))?;
    let tables_path = first_existing(
        root,
        &[format!("{s}_tables.json"), format!("{s}/{s}_tables.json"), "tables.json".to_string()],
    );

    let mut hashed = Vec::new();
    let examples_bytes = std::fs::read(&examples_path).map_err(|e| Error::io(&examples_path, e))?;
    hashed.extend_from_slice(&examples_bytes);

    let mut schemas = BTreeMap::new();
    let mut db_paths = BTreeMap::new();
    match &tables_path {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            hashed.extend_from_slice(&bytes);
            let raw: Vec<RawTables> = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, &e))?;
            for entry in raw {
                let db_path = db_file(&db_dir, &entry.db_id)?;
                let mut schema = entry.into_schema().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                apply_description_files(&mut schema, &db_dir)?;
                db_paths.insert(schema.db_id.clone(), db_path);
                schemas.insert(schema.db_id.clone(), schema);
            }
        }
        None => {
            let entries = std::fs::read_dir(&db_dir).map_err(|e| Error::io(&db_dir, e))?;
            let mut ids: Vec<String> = entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            ids.sort();
            for db_id in ids {
                let path = db_file(&db_dir, &db_id)?;
                let mut schema = introspect_schema(&db_id, &path)?;
                apply_description_files(&mut schema, &db_dir)?;
                db_paths.insert(db_id.clone(), path);
                schemas.insert(db_id, schema);
            }
        }
    }

    let raw_examples: Vec<Value> =
        serde_json::from_slice(&examples_bytes).map_err(|e| Error::parse(&examples_path, &e))?;
    let mut examples = Vec::with_capacity(raw_examples.len());
    for (index, raw) in raw_examples.iter().enumerate() {
        let example = parse_example(raw, split, index)
            .map_err(|msg| Error::Data(format!("{} entry {index}: {msg}", examples_path.display())))?;
        if !schemas.contains_key(&example.db_id) {
            return Err(Error::Data(format!(
                "example {} references unknown db_id `{}`",
                example.example_id, example.db_id
            )));
        }
        examples.push(example);
    }

    Ok(Benchmark {
        root: root.to_path_buf(),
        split,
        examples,
        schemas,
        db_paths,
        content_hash: sha256_hex(&hashed),
    })
}

fn first_existing(root: &Path, candidates: &[String]) -> Option<PathBuf> {
    candidates.iter().map(|c| root.join(c)).find(|p| p.exists())
}

fn db_file(db_dir: &Path, db_id: &str) -> Result<PathBuf> {
    let path = db_dir.join(db_id).join(format!("{db_id}.sqlite"));
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Data(format!(
            "missing database file for db_id `{db_id}` (expected {})",
            path.display()
        )))
    }
}

#[derive(Debug, Deserialize)]
struct RawTables {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    column_types: Vec<String>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
    #[serde(default)]
    column_descriptions: Vec<String>,
}

impl RawTables {
    fn into_schema(self) -> std::result::Result<DbSchema, String> {
        let mut tables: Vec<TableDef> = self
            .table_names_original
            .iter()
            .map(|name| TableDef {
                name: name.clone(),
                columns: Vec::new(),
            })
            .collect();
        for (i, (table_idx, name)) in self.column_names_original.iter().enumerate() {
            if *table_idx < 0 {
                continue;
            }
            let table = tables
                .get_mut(*table_idx as usize)
                .ok_or_else(|| format!("column `{name}` points at missing table index {table_idx}"))?;
            table.columns.push(ColumnDef {
                name: name.clone(),
                declared_type: self.column_types.get(i).cloned().unwrap_or_default(),
                description: self.column_descriptions.get(i).cloned().unwrap_or_default(),
            });
        }
        let column_ref = |idx: usize| -> std::result::Result<ColumnRef, String> {
            let (t, c) = self
                .column_names_original
                .get(idx)
                .ok_or_else(|| format!("foreign key points at missing column index {idx}"))?;
            let table = self
                .table_names_original
                .get(usize::try_from(*t).map_err(|_| format!("foreign key uses column index {idx} (`*`)"))?)
                .ok_or_else(|| format!("column index {idx} points at missing table"))?;
            Ok(ColumnRef {
                table: table.clone(),
                column: c.clone(),
            })
        };
        let foreign_keys = self
            .foreign_keys
            .iter()
            .map(|(from, to)| Ok(ForeignKey { from: column_ref(*from)?, to: column_ref(*to)? }))
            .collect::<std::result::Result<Vec<_>, String>>()?;
        DbSchema::new(self.db_id, tables, foreign_keys).map_err(|e| e.to_string())
    }
}

fn parse_example(raw: &Value, split: Split, index: usize) -> std::result::Result<BenchmarkExample, String> {
    let obj = raw.as_object().ok_or("not a JSON object")?;
    let text = |key: &str| obj.get(key).and_then(Value::as_str).map(str::to_string);
    let example_id = match obj.get("example_id").or_else(|| obj.get("question_id")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("{split}_{index}"),
    };
    let db_id = text("db_id").ok_or("missing db_id")?;
    let question = text("question").ok_or("missing question")?;
    let gold_sql = text("SQL")
        .or_else(|| text("query"))
        .or_else(|| text("gold_sql"))
        .ok_or("missing gold SQL (`SQL` or `query`)")?;
    if gold_sql.trim().is_empty() {
        return Err("empty gold SQL".into());
    }
    let difficulty = text("difficulty")
        .or_else(|| text("hardness"))
        .map(|d| Difficulty::parse_label(&d))
        .unwrap_or(Difficulty::Unknown);
    Ok(BenchmarkExample {
        example_id,
        db_id,
        question,
        evidence: text("evidence"),
        gold_sql,
        difficulty,
    })
}

fn apply_description_files(schema: &mut DbSchema, db_dir: &Path) -> Result<()> {
    let desc_dir = db_dir.join(&schema.db_id).join("database_description");
    if !desc_dir.is_dir() {
        return Ok(());
    }
    for table in &mut schema.tables {
        let path = desc_dir.join(format!("{}.csv", table.name));
        if !path.is_file() {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .clone();
        let pos = |name: &str| headers.iter().position(|h| h.trim().trim_start_matches('\u{feff}') == name);
        let (Some(name_idx), Some(desc_idx)) = (pos("original_column_name"), pos("column_description")) else {
            continue;
        };
        for record in reader.records() {
            let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let (Some(name), Some(desc)) = (record.get(name_idx), record.get(desc_idx)) else {
                continue;
            };
            if let Some(col) = table
                .columns
                .iter_mut()
                .find(|c| c.name.eq_ignore_ascii_case(name.trim()))
            {
                if col.description.is_empty() {
                    col.description = desc.trim().to_string();
                }
            }
        }
    }
    Ok(())
}

pub fn open_read_only(path: &Path) -> Result<Connection> {
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|source| Error::Sqlite {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the schema straight from a SQLite file, in table creation order.
pub fn introspect_schema(db_id: &str, path: &Path) -> Result<DbSchema> {
    let conn = open_read_only(path)?;
    let sqlite_err = |source| Error::Sqlite {
        path: path.to_path_buf(),
        source,
    };
    let table_names: Vec<String> = {
        let mut stmt = conn
            .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
            .map_err(sqlite_err)?;
        let rows = stmt.query_map([], |r| r.get(0)).map_err(sqlite_err)?;
        rows.collect::<rusqlite::Result<_>>().map_err(sqlite_err)?
    };
    let mut tables = Vec::new();
    let mut foreign_keys = Vec::new();
    for name in &table_names {
        let mut stmt = conn
            .prepare("SELECT name, type FROM pragma_table_info(?1) ORDER BY cid")
            .map_err(sqlite_err)?;
        let columns = stmt
            .query_map([name], |r| {
                Ok(ColumnDef {
                    name: r.get(0)?,
                    declared_type: r.get::<_, String>(1)?.to_lowercase(),
                    description: String::new(),
                })
            })
            .map_err(sqlite_err)?
            .collect::<rusqlite::Result<Vec<_>>>()
            .map_err(sqlite_err)?;
        let mut fk_stmt = conn
            .prepare(r#"SELECT "table", "from", "to" FROM pragma_foreign_key_list(?1) ORDER BY id, seq"#)
            .map_err(sqlite_err)?;
        let fks = fk_stmt
            .query_map([name], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, Option<String>>(2)?))
            })
            .map_err(sqlite_err)?
            .collect::<rusqlite::Result<Vec<_>>>()
            .map_err(sqlite_err)?;
        for (target, from, to) in fks {
            // implicit target column means the referenced primary key
            let to = match to {
                Some(c) => c,
                None => conn
                    .query_row(
                        "SELECT name FROM pragma_table_info(?1) WHERE pk = 1",
                        [&target],
                        |r| r.get(0),
                    )
                    .map_err(sqlite_err)?,
            };
            foreign_keys.push(ForeignKey {
                from: ColumnRef { table: name.clone(), column: from },
                to: ColumnRef { table: target, column: to },
            });
        }
        tables.push(TableDef { name: name.clone(), columns });
    }
    // canonicalize endpoint spelling; SQLite allows case drift in FK clauses
    let schema_probe = DbSchema {
        db_id: db_id.to_string(),
        tables: tables.clone(),
        foreign_keys: Vec::new(),
    };
    let foreign_keys = foreign_keys
        .into_iter()
        .filter_map(|fk| {
            Some(ForeignKey {
                from: schema_probe.resolve_column(&fk.from.table, &fk.from.column)?,
                to: schema_probe.resolve_column(&fk.to.table, &fk.to.column)?,
            })
        })
        .collect();
    Ok(DbSchema::new(db_id, tables, foreign_keys)?)
}
