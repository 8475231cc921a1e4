//! Schema linking: table selection, then column selection.
//!
//! Each stage sends several prompts whose schema listing is shuffled with
//! a different seed, samples every prompt `n` times and takes the union of
//! all answers. Names are matched case-insensitively against the schema;
//! anything that does not resolve is dropped and recorded.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench_data::{render_schema_with, BenchmarkExample, DbSchema, RenderOptions, TableOrder};
use crate::config::RunConfig;
use crate::error::{Error, Result, SchemaError};
use crate::llm::{Gateway, LlmRequest};
use crate::util::derive_seed;

/// Pruned schema: table name to retained column names, schema spelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSchema {
    pub db_id: String,
    pub tables: BTreeMap<String, Vec<String>>,
}

impl LinkedSchema {
    /// Every table with every column.
    pub fn full(schema: &DbSchema) -> Self {
        LinkedSchema {
            db_id: schema.db_id.clone(),
            tables: schema
                .tables
                .iter()
                .map(|t| (t.name.clone(), t.columns.iter().map(|c| c.name.clone()).collect()))
                .collect(),
        }
    }

    /// The given tables with all their columns. Unknown names are skipped.
    pub fn from_tables<'a>(schema: &DbSchema, tables: impl IntoIterator<Item = &'a String>) -> Self {
        let mut out = LinkedSchema {
            db_id: schema.db_id.clone(),
            tables: BTreeMap::new(),
        };
        for name in tables {
            if let Some(t) = schema.table(name) {
                out.tables
                    .insert(t.name.clone(), t.columns.iter().map(|c| c.name.clone()).collect());
            }
        }
        out
    }

    /// Retained columns of `table`, looked up case-insensitively.
    pub fn columns_of(&self, table: &str) -> Option<&Vec<String>> {
        self.tables
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(table))
            .map(|(_, cols)| cols)
    }

    pub fn table_set(&self) -> BTreeSet<String> {
        self.tables.keys().cloned().collect()
    }

    /// `table.column` names.
    pub fn column_set(&self) -> BTreeSet<String> {
        self.tables
            .iter()
            .flat_map(|(t, cols)| cols.iter().map(move |c| format!("{t}.{c}")))
            .collect()
    }

    pub fn validate(&self, schema: &DbSchema) -> Result<(), SchemaError> {
        if !self.db_id.eq_ignore_ascii_case(&schema.db_id) {
            return Err(SchemaError::WrongDatabase {
                expected: schema.db_id.clone(),
                found: self.db_id.clone(),
            });
        }
        for (table, cols) in &self.tables {
            let def = schema
                .table(table)
                .ok_or_else(|| SchemaError::UnknownTable(table.clone()))?;
            if cols.is_empty() {
                return Err(SchemaError::EmptyLinkedTable(table.clone()));
            }
            for c in cols {
                if def.column(c).is_none() {
                    return Err(SchemaError::UnknownColumn {
                        table: table.clone(),
                        column: c.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkingStage {
    Table,
    Column,
}

impl LinkingStage {
    pub fn tag(self) -> &'static str {
        match self {
            LinkingStage::Table => "table_link",
            LinkingStage::Column => "column_link",
        }
    }
}

/// What one linking prompt produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkingTrace {
    pub stage: LinkingStage,
    pub prompt_index: usize,
    pub seed: u64,
    /// Canonical names per parsed sample.
    pub responses: Vec<Vec<String>>,
    pub unparseable: usize,
    /// Names that did not resolve against the schema.
    pub dropped_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLinking {
    pub tables: BTreeSet<String>,
    pub traces: Vec<LinkingTrace>,
    /// Every parsed answer was empty, so all tables were kept.
    pub all_tables_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnLinking {
    pub linked: LinkedSchema,
    pub traces: Vec<LinkingTrace>,
    /// Foreign-key columns added because no sample named them.
    pub forced_columns: Vec<String>,
    /// Linked tables that received no column and were kept whole.
    pub all_columns_fallback: Vec<String>,
}

const SCHEMA_HEADER: &str = "### SQLite SQL tables, with their properties:";

const TABLE_INSTRUCTION: &str = "### Given a database schema, question, and knowledge evidence, extract a list of tables that should be referenced to convert the question into SQL.";

const TABLE_ANSWER: &str = r#"You need to not only select the required tables, but also explain in detail why each table is needed.
Your answer should strictly follow the following json format.
{
  "reasoning": "",  // The reason for choosing each table.
  "tables": [],  // List of selected tables.
}

### Your Answer: "#;

const COLUMN_INSTRUCTION: &str = "### Given a database schema, question, and knowledge evidence, extract a list of columns that should be referenced to convert the question into SQL.";

const COLUMN_ANSWER: &str = r#"You need to not only select the required columns, but also explain in detail why each column is needed.
Your answer should strictly follow the following json format.
{
  "reasoning": "",  // The reason for choosing each column.
  "columns": ["table_name_i.column_name_j", ...],  // List of selected columns 
}

### Your Answer:"#;

/// `### Question:` line plus the evidence line when there is evidence.
pub(crate) fn question_lines(question: &str, evidence: Option<&str>) -> String {
    let mut out = format!("### Question: {question}\n");
    if let Some(e) = evidence {
        out.push_str(&format!("### Knowledge Evidence: {e}\n"));
    }
    out
}

pub fn build_table_prompt(schema: &DbSchema, question: &str, evidence: Option<&str>, seed: u64) -> String {
    let opts = RenderOptions {
        order: TableOrder::Seeded(seed),
        ..RenderOptions::default()
    };
    format!(
        "{TABLE_INSTRUCTION}\n\n{SCHEMA_HEADER}\n{}\n\n{}\n{TABLE_ANSWER}",
        render_schema_with(schema, None, &opts),
        question_lines(question, evidence),
    )
}

/// Column-linking prompt over the linked tables only. Table order and the
/// column order inside each table are both permuted by `seed`.
pub fn build_column_prompt(
    schema: &DbSchema,
    linked_tables: &BTreeSet<String>,
    question: &str,
    evidence: Option<&str>,
    seed: u64,
) -> String {
    let linked = LinkedSchema::from_tables(schema, linked_tables);
    let opts = RenderOptions {
        order: TableOrder::Seeded(seed),
        shuffle_columns: true,
        with_types: false,
    };
    format!(
        "{COLUMN_INSTRUCTION}\n\n{SCHEMA_HEADER}\n{}\n\n{}\n{COLUMN_ANSWER}",
        render_schema_with(schema, Some(&linked), &opts),
        question_lines(question, evidence),
    )
}

/// Strips whitespace and one layer of quoting: "x", 'x', `x`, [x].
fn clean_name(raw: &str) -> &str {
    let mut s = raw.trim();
    loop {
        let stripped = [('"', '"'), ('\'', '\''), ('`', '`'), ('[', ']')]
            .iter()
            .find_map(|(open, close)| s.strip_prefix(*open).and_then(|r| r.strip_suffix(*close)));
        match stripped {
            Some(inner) if !inner.is_empty() => s = inner.trim(),
            _ => return s,
        }
    }
}

fn resolve_table(schema: &DbSchema, raw: &str) -> Option<String> {
    schema.table(clean_name(raw)).map(|t| t.name.clone())
}

/// `table.column` in any quoting style; tries every dot as the separator.
fn resolve_column(schema: &DbSchema, raw: &str) -> Option<(String, String)> {
    let part = |p: &str| p.trim().trim_matches(|c: char| matches!(c, '[' | ']' | '`' | '"' | '\'')).trim().to_string();
    let s = raw.trim();
    s.match_indices('.').find_map(|(i, _)| {
        let r = schema.resolve_column(&part(&s[..i]), &part(&s[i + 1..]))?;
        Some((r.table, r.column))
    })
}

fn string_items(value: Option<&Value>) -> Option<Vec<String>> {
    let items = value?.as_array()?;
    Some(
        items
            .iter()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect(),
    )
}

/// Runs one linking prompt and resolves every sampled answer with
/// `resolve`, which returns `None` for names to drop.
fn run_prompt(
    gateway: &Gateway,
    stage: LinkingStage,
    index: usize,
    seed: u64,
    prompt: String,
    config: &RunConfig,
    resolve: &(dyn Fn(&str) -> Option<String> + Sync),
) -> LinkingTrace {
    let mut trace = LinkingTrace {
        stage,
        prompt_index: index,
        seed,
        responses: Vec::new(),
        unparseable: 0,
        dropped_names: Vec::new(),
        error: None,
    };
    let field = match stage {
        LinkingStage::Table => "tables",
        LinkingStage::Column => "columns",
    };
    let request = LlmRequest::new(prompt, stage.tag())
        .samples(config.samples, config.temperature)
        .max_output_tokens(config.max_output_tokens)
        .variant(index);
    let completions = match gateway.complete_parsed(&request, &[field]) {
        Ok(c) => c,
        Err(e) => {
            trace.error = Some(e.to_string());
            return trace;
        }
    };
    for completion in completions {
        let Some(names) = string_items(completion.parsed.as_ref().and_then(|m| m.get(field))) else {
            trace.unparseable += 1;
            continue;
        };
        let mut resolved = BTreeSet::new();
        for name in names {
            match resolve(&name) {
                Some(canonical) => {
                    resolved.insert(canonical);
                }
                None => trace.dropped_names.push(name),
            }
        }
        trace.responses.push(resolved.into_iter().collect());
    }
    trace
}

fn all_failed(traces: &[LinkingTrace]) -> Option<String> {
    if traces.iter().any(|t| !t.responses.is_empty()) {
        return None;
    }
    let first_error = traces.iter().find_map(|t| t.error.clone());
    Some(first_error.unwrap_or_else(|| "no sample could be parsed".to_string()))
}

pub fn link_tables(
    gateway: &Gateway,
    example: &BenchmarkExample,
    schema: &DbSchema,
    config: &RunConfig,
) -> Result<TableLinking> {
    let resolve = |name: &str| resolve_table(schema, name);
    let traces: Vec<LinkingTrace> = (0..config.table_prompts)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(config.seed, &example.example_id, "table_link", i);
            let prompt = build_table_prompt(schema, &example.question, example.evidence(), seed);
            run_prompt(gateway, LinkingStage::Table, i, seed, prompt, config, &resolve)
        })
        .collect();
    if let Some(reason) = all_failed(&traces) {
        return Err(Error::Linking(format!("table linking for {}: {reason}", example.example_id)));
    }
    let mut tables: BTreeSet<String> = traces.iter().flat_map(|t| t.responses.iter().flatten().cloned()).collect();
    let all_tables_fallback = tables.is_empty();
    if all_tables_fallback {
        tables = schema.tables.iter().map(|t| t.name.clone()).collect();
    }
    Ok(TableLinking {
        tables,
        traces,
        all_tables_fallback,
    })
}

pub fn link_columns(
    gateway: &Gateway,
    example: &BenchmarkExample,
    schema: &DbSchema,
    linked_tables: &BTreeSet<String>,
    config: &RunConfig,
) -> Result<ColumnLinking> {
    let tables: BTreeSet<String> = linked_tables.iter().filter_map(|t| resolve_table(schema, t)).collect();
    if tables.is_empty() {
        return Err(Error::Linking(format!("column linking for {}: no linked tables", example.example_id)));
    }
    let resolve = |name: &str| {
        let (t, c) = resolve_column(schema, name)?;
        tables.contains(&t).then(|| format!("{t}.{c}"))
    };
    let traces: Vec<LinkingTrace> = (0..config.column_prompts)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(config.seed, &example.example_id, "column_link", i);
            let prompt = build_column_prompt(schema, &tables, &example.question, example.evidence(), seed);
            run_prompt(gateway, LinkingStage::Column, i, seed, prompt, config, &resolve)
        })
        .collect();
    if let Some(reason) = all_failed(&traces) {
        return Err(Error::Linking(format!("column linking for {}: {reason}", example.example_id)));
    }
    let named: BTreeSet<String> = traces.iter().flat_map(|t| t.responses.iter().flatten().cloned()).collect();
    Ok(assemble_columns(schema, &tables, &named, traces))
}

/// Union of named columns, plus join keys between linked tables, plus
/// whole tables for linked tables nobody named a column of.
fn assemble_columns(
    schema: &DbSchema,
    tables: &BTreeSet<String>,
    named: &BTreeSet<String>,
    traces: Vec<LinkingTrace>,
) -> ColumnLinking {
    let mut chosen: BTreeMap<String, BTreeSet<String>> = tables.iter().map(|t| (t.clone(), BTreeSet::new())).collect();
    for entry in named {
        let (t, c) = entry.split_once('.').expect("resolved names are qualified");
        if let Some(set) = chosen.get_mut(t) {
            set.insert(c.to_string());
        }
    }
    let mut all_columns_fallback = Vec::new();
    for (table, cols) in chosen.iter_mut() {
        if cols.is_empty() {
            all_columns_fallback.push(table.clone());
            let def = schema.table(table).expect("linked table exists");
            cols.extend(def.columns.iter().map(|c| c.name.clone()));
        }
    }
    let mut forced_columns = Vec::new();
    for fk in &schema.foreign_keys {
        if !(tables.contains(&fk.from.table) && tables.contains(&fk.to.table)) {
            continue;
        }
        for end in [&fk.from, &fk.to] {
            if chosen.get_mut(&end.table).expect("linked").insert(end.column.clone()) {
                forced_columns.push(end.to_string());
            }
        }
    }
    // keep columns in declaration order
    let linked = LinkedSchema {
        db_id: schema.db_id.clone(),
        tables: chosen
            .into_iter()
            .map(|(t, cols)| {
                let def = schema.table(&t).expect("linked table exists");
                let ordered = def
                    .columns
                    .iter()
                    .filter(|c| cols.contains(&c.name))
                    .map(|c| c.name.clone())
                    .collect();
                (t, ordered)
            })
            .collect(),
    };
    ColumnLinking {
        linked,
        traces,
        forced_columns,
        all_columns_fallback,
    }
}
