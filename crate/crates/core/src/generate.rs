//! Candidate SQL generation.
//!
//! One prompt per few-shot variant, each sampled `n` times. Samples are
//! parsed for their `sql` field; a sample that is not valid JSON but holds
//! exactly one fenced code block is salvaged from that block.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench_data::{
    open_read_only, render_column_descriptions, render_sample_rows, render_schema, BenchmarkExample, DbSchema,
    TableOrder,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fewshot::FewShotList;
use crate::linking::{question_lines, LinkedSchema};
use crate::llm::{single_code_block, Gateway, LlmRequest};
use crate::sql_text::{normalize_single_statement, SqlShapeError};

/// Everything the generation and selection prompts need about one question.
#[derive(Debug, Clone, Copy)]
pub struct ExampleContext<'a> {
    pub example: &'a BenchmarkExample,
    pub schema: &'a DbSchema,
    pub linked: &'a LinkedSchema,
    pub db_path: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQuery {
    pub sql: String,
    pub prompt_index: usize,
    pub sample_index: usize,
    #[serde(default)]
    pub reasoning: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// Neither JSON with `sql` nor a single code block.
    pub unparseable: usize,
    pub empty_sql: usize,
    pub multi_statement: usize,
    /// Accepted from a fenced code block after the JSON parse failed.
    pub salvaged: usize,
    /// Prompts whose request failed outright.
    pub failed_prompts: usize,
}

impl DropCounts {
    pub fn dropped(&self) -> usize {
        self.unparseable + self.empty_sql + self.multi_statement
    }

    fn add(&mut self, other: &DropCounts) {
        self.unparseable += other.unparseable;
        self.empty_sql += other.empty_sql;
        self.multi_statement += other.multi_statement;
        self.salvaged += other.salvaged;
        self.failed_prompts += other.failed_prompts;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Ordered by (prompt_index, sample_index).
    pub candidates: Vec<CandidateQuery>,
    pub drops: DropCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

const GENERATE_INSTRUCTION: &str = "### Given a database schema, question, and knowledge evidence, generate the correct sqlite SQL query for the question.";

const GENERATE_ANSWER: &str = r#"You need to not only create the SQL, but also provide the detailed reasoning steps required to create the SQL. Your answer should strictly follow the following json format:
{
  "reasoning": "",  // The reasoning steps for generating SQL.
  "sql": "",  // The final generated SQL.
}

### Your Answer:"#;

/// `<examples>` block, or nothing for an empty list.
pub(crate) fn render_examples(fewshot: &FewShotList) -> String {
    if fewshot.items.is_empty() {
        return String::new();
    }
    let mut out = String::from("<examples>\n");
    for item in &fewshot.items {
        out.push_str(&format!("# Question: {}\n", item.question));
        if let Some(e) = item.evidence.as_deref().map(str::trim).filter(|e| !e.is_empty()) {
            out.push_str(&format!("# Knowledge Evidence: {e}\n"));
        }
        out.push_str(&format!("# Gold SQL: {}\n\n", item.gold_sql));
    }
    out.push_str("</examples>\n\n\n");
    out
}

/// Schema, column descriptions and sample rows of the linked part of the
/// database, ending with the question and evidence lines.
pub(crate) fn render_database_context(ctx: &ExampleContext<'_>, sample_rows: usize) -> Result<String> {
    let conn = open_read_only(ctx.db_path)?;
    Ok(format!(
        "### SQLite SQL tables, with their properties:\n{}\n\n\
         ### The type and description of each column:\n{}\n\n\
         ### Sample rows of each table in csv format:\n{}\n\n\n{}",
        render_schema(ctx.schema, Some(ctx.linked), TableOrder::Declared),
        render_column_descriptions(ctx.schema, Some(ctx.linked)),
        render_sample_rows(&conn, ctx.schema, Some(ctx.linked), sample_rows)?,
        question_lines(&ctx.example.question, ctx.example.evidence()),
    ))
}

pub fn build_generation_prompt(ctx: &ExampleContext<'_>, fewshot: &FewShotList, sample_rows: usize) -> Result<String> {
    Ok(format!(
        "{GENERATE_INSTRUCTION}\n\n{}{}\n{GENERATE_ANSWER}",
        render_examples(fewshot),
        render_database_context(ctx, sample_rows)?,
    ))
}

enum Extracted {
    Sql { sql: String, reasoning: String, salvaged: bool },
    Unparseable,
    Empty,
    MultiStatement,
}

/// `sql` from a JSON answer, or from the only fenced code block.
fn extract_sql(text: &str) -> Extracted {
    let (raw, reasoning, salvaged) = match crate::llm::parse_json_answer(text, &["sql"]) {
        Ok(map) => match map.get("sql").and_then(|v| v.as_str()) {
            Some(sql) => (
                sql.to_string(),
                map.get("reasoning").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
                false,
            ),
            None => return Extracted::Unparseable,
        },
        Err(_) => match single_code_block(text) {
            Some(block) => (block, String::new(), true),
            None => return Extracted::Unparseable,
        },
    };
    match normalize_single_statement(&raw) {
        Ok(sql) => Extracted::Sql { sql, reasoning, salvaged },
        Err(SqlShapeError::Empty) => Extracted::Empty,
        Err(SqlShapeError::MultipleStatements(_)) => Extracted::MultiStatement,
    }
}

/// Parses one prompt's samples into candidates.
pub fn collect_candidates(prompt_index: usize, texts: &[String]) -> (Vec<CandidateQuery>, DropCounts) {
    let mut drops = DropCounts::default();
    let mut out = Vec::new();
    for (sample_index, text) in texts.iter().enumerate() {
        match extract_sql(text) {
            Extracted::Sql { sql, reasoning, salvaged } => {
                drops.salvaged += usize::from(salvaged);
                out.push(CandidateQuery {
                    sql,
                    prompt_index,
                    sample_index,
                    reasoning,
                });
            }
            Extracted::Unparseable => drops.unparseable += 1,
            Extracted::Empty => drops.empty_sql += 1,
            Extracted::MultiStatement => drops.multi_statement += 1,
        }
    }
    (out, drops)
}

/// Samples every variant's prompt and gathers the parsed candidates.
pub fn generate_candidates(
    gateway: &Gateway,
    ctx: &ExampleContext<'_>,
    variants: &[FewShotList],
    config: &RunConfig,
) -> Result<Generation> {
    let prompts: Vec<String> = variants
        .iter()
        .map(|v| build_generation_prompt(ctx, v, config.sample_rows))
        .collect::<Result<_>>()?;
    let per_prompt: Vec<std::result::Result<(Vec<CandidateQuery>, DropCounts), String>> = prompts
        .into_par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let request = LlmRequest::new(prompt, "generate")
                .samples(config.samples, config.temperature)
                .max_output_tokens(config.max_output_tokens)
                .variant(i);
            let texts: Vec<String> = gateway
                .complete(&request)
                .map_err(|e| format!("prompt {i}: {e}"))?
                .into_iter()
                .map(|c| c.raw_text)
                .collect();
            Ok(collect_candidates(i, &texts))
        })
        .collect();
    let mut generation = Generation {
        candidates: Vec::new(),
        drops: DropCounts::default(),
        errors: Vec::new(),
    };
    for result in per_prompt {
        match result {
            Ok((candidates, drops)) => {
                generation.candidates.extend(candidates);
                generation.drops.add(&drops);
            }
            Err(e) => {
                generation.drops.failed_prompts += 1;
                generation.errors.push(e);
            }
        }
    }
    if generation.candidates.is_empty() {
        let detail = generation.errors.first().cloned().unwrap_or_else(|| {
            format!("all {} samples were dropped", generation.drops.dropped())
        });
        return Err(Error::Generation(format!("{}: {detail}", ctx.example.example_id)));
    }
    Ok(generation)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use serde_json::json;

    use super::*;
    use crate::fewshot::FewShotItem;
    use crate::llm::FixtureRules;
    use crate::testutil::*;

    fn linked(tables: &[(&str, &[&str])]) -> LinkedSchema {
        LinkedSchema {
            db_id: "toxicology".into(),
            tables: tables
                .iter()
                .map(|(t, c)| (t.to_string(), c.iter().map(|s| s.to_string()).collect()))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn extraction_rules() {
        let (c, d) = collect_candidates(
            2,
            &[
                r#"{"reasoning": "r", "sql": "SELECT 1;"}"#.to_string(),
                "prose\n```sql\nSELECT 2\n```".to_string(),
                r#"{"reasoning":"...","sql":"SELECT 1; DROP TABLE x"}"#.to_string(),
                r#"{"reasoning":"...","sql":"  ;"}"#.to_string(),
                "no idea".to_string(),
                r#"{"reasoning": "missing"}"#.to_string(),
            ],
        );
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].sql, "SELECT 1");
        assert_eq!(c[0].reasoning, "r");
        assert_eq!((c[0].prompt_index, c[0].sample_index), (2, 0));
        assert_eq!(c[1].sql, "SELECT 2");
        assert_eq!(c[1].sample_index, 1);
        assert_eq!(
            d,
            DropCounts {
                unparseable: 2,
                empty_sql: 1,
                multi_statement: 1,
                salvaged: 1,
                failed_prompts: 0
            }
        );
    }

    #[test]
    fn prompt_sections_in_order_and_subset() {
        let dir = tempfile::tempdir().unwrap();
        let db = toxicology_db(dir.path());
        let schema = toxicology_schema();
        let ex = example("e", TRIPLE_BOND_QUESTION, Some(TRIPLE_BOND_EVIDENCE), "SELECT 1");
        let l = linked(&[("molecule", &["molecule_id", "label"]), ("bond", &["molecule_id", "bond_type"])]);
        let ctx = ExampleContext {
            example: &ex,
            schema: &schema,
            linked: &l,
            db_path: &db,
        };
        let p = build_generation_prompt(&ctx, &FewShotList::empty(0), 3).unwrap();
        assert!(!p.contains("<examples>"));
        assert!(!p.contains("bond_id"));
        let heads = [
            "### SQLite SQL tables",
            "### The type and description",
            "### Sample rows",
            "### Question:",
            "### Knowledge Evidence:",
            "### Your Answer:",
        ];
        let positions: Vec<usize> = heads.iter().map(|h| p.find(h).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(p.contains("molecule_id,bond_type\nTR000,-\nTR000,-\nTR000,-\n"));

        let shots = FewShotList {
            variant_index: 0,
            recipe: "question".into(),
            items: vec![FewShotItem {
                example_id: "t".into(),
                question: "Q?".into(),
                evidence: None,
                gold_sql: "SELECT 9".into(),
            }],
        };
        let p = build_generation_prompt(&ctx, &shots, 3).unwrap();
        assert!(p.contains("<examples>\n# Question: Q?\n# Gold SQL: SELECT 9\n\n</examples>\n\n\n### SQLite"));
    }

    #[test]
    fn generation_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let db = toxicology_db(dir.path());
        let schema = toxicology_schema();
        let ex = example("e", "How many bonds?", None, "SELECT 1");
        let l = LinkedSchema::full(&schema);
        let ctx = ExampleContext {
            example: &ex,
            schema: &schema,
            linked: &l,
            db_path: &db,
        };
        let rules: FixtureRules = serde_json::from_value(json!({"completions": [
            {"tag": "generate", "variant": 1, "responses": ["bad", "bad", "bad", {"sql": "SELECT 2"}], "cycle": true},
            {"tag": "generate", "responses": [{"reasoning": "", "sql": "SELECT 1"}], "cycle": true}
        ]}))
        .unwrap();
        let gw = Gateway::from_rules(rules);
        let config = RunConfig {
            generation_prompts: 3,
            samples: 4,
            ..RunConfig::desk()
        };
        let variants: Vec<FewShotList> = (0..3)
            .map(|i| FewShotList {
                variant_index: i,
                recipe: "question".into(),
                items: vec![FewShotItem {
                    example_id: format!("t{i}"),
                    question: format!("Q{i}?"),
                    evidence: None,
                    gold_sql: "SELECT 9".into(),
                }],
            })
            .collect();
        let out = generate_candidates(&gw, &ctx, &variants, &config).unwrap();
        assert_eq!(out.candidates.len(), 9);
        assert_eq!(out.drops.unparseable, 3);
        let provenance: Vec<(usize, usize)> = out.candidates.iter().map(|c| (c.prompt_index, c.sample_index)).collect();
        let mut sorted = provenance.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(provenance, sorted);
        assert!(out.candidates.len() <= config.generation_prompts * config.samples);

        let none = Gateway::from_rules(
            serde_json::from_value(json!({"completions": [{"tag": "generate", "responses": ["x"], "cycle": true}]})).unwrap(),
        );
        assert!(matches!(generate_candidates(&none, &ctx, &variants, &config), Err(Error::Generation(_))));
    }
}
