//! Few-shot example retrieval.
//!
//! Training questions are masked (schema words and literals replaced by
//! `[TABLE]`, `[COLUMN]`, `[VALUE]`), both forms are embedded, and the
//! generation prompts draw their examples from exact cosine top-k over
//! either form. Variants beyond the two pure rankings mix them:
//!
//! | variant | list |
//! |---------|------|
//! | 0 | question similarity |
//! | 1 | masked-question similarity |
//! | 2 | interleave, question list first |
//! | 3 | interleave, masked list first |
//! | 4 | merge by summed rank (a missing rank counts as `k`) |
//! | 5+ | variant `i mod 5`, reversed |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench_data::{render_schema, BenchmarkExample, DbSchema, TableOrder};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linking::{question_lines, LinkedSchema};
use crate::llm::{EmbeddingVector, Gateway, GatewayError, LlmRequest};
use crate::util::{read_json, write_json_atomic};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedQuestion {
    pub original: String,
    pub masked: String,
    /// Set when `masked` is just the original question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl MaskedQuestion {
    pub fn unmasked(question: &str, reason: impl Into<String>) -> Self {
        MaskedQuestion {
            original: question.to_string(),
            masked: question.to_string(),
            fallback: Some(reason.into()),
        }
    }
}

const MASK_EXAMPLES: &str = r#"### Given a DB schema and a question, mask the table name, column name, and values in the question.

<example1>
### SQLite SQL tables, with their properties:
# customers ( CustomerID: integer, Segment: text, Currency: text )
# gasstations ( GasStationID: integer, ChainID: integer, Country: text, Segment: text )
# products ( ProductID: integer, Description: text )
# transactions_1k ( TransactionID: integer, Date: date, Time: text, CustomerID: integer, CardID: integer, GasStationID: integer, ProductID: integer, Amount: integer, Price: real )
# yearmonth ( CustomerID: integer, Date: text, Consumption: real )

### Question: For all the people who paid more than 29.00 per unit of product id No.5. Give their consumption status in the August of 2012.
### Masked Question: For all the [TABLE] who paid more than [VALUE] per unit of [COLUMN] [VALUE]. Give their consumption status in the [VALUE]. 
</example1>

<example2>
### SQLite SQL tables, with their properties:
# customers ( CustomerID: integer, Segment: text, Currency: text )
# gasstations ( GasStationID: integer, ChainID: integer, Country: text, Segment: text )
# products ( ProductID: integer, Description: text )
# transactions_1k ( TransactionID: integer, Date: date, Time: text, CustomerID: integer, CardID: integer, GasStationID: integer, ProductID: integer, Amount: integer, Price: real )
# yearmonth ( CustomerID: integer, Date: text, Consumption: real )

### Question: How much did customer 6 consume in total between August and November 2013?
### Masked Question: How much did [TABLE] [VALUE] consume in total between [VALUE] and [VALUE]?
</example2>

<example3>
### SQLite SQL tables, with their properties:
# drivers ( driverId: integer, driverRef: text, number: integer, code: text, forename: text, surname: text, dob: date, nationality: text, url: text )

### Question: How many Australian drivers who were born in 1980? 
### Masked Question: How many [VALUE] [TABLE] who were born in [VALUE]?
</example3>"#;

const SCHEMA_HEADER: &str = "### SQLite SQL tables, with their properties:";

/// Masking prompt: three fixed worked examples, then the target schema
/// and question.
pub fn build_mask_prompt(
    schema: &DbSchema,
    linked: Option<&LinkedSchema>,
    question: &str,
    evidence: Option<&str>,
) -> String {
    format!(
        "{MASK_EXAMPLES}\n\n\n{SCHEMA_HEADER}\n{}\n\n{}\n### Masked Question: ",
        render_schema(schema, linked, TableOrder::Declared),
        question_lines(question, evidence),
    )
}

/// The masked question is the first non-empty line after the last
/// `### Masked Question:` cue, or of the whole text when the cue is not
/// repeated.
pub fn parse_masked_answer(text: &str) -> Option<String> {
    let cue = "### Masked Question:";
    let tail = match text.rfind(cue) {
        Some(i) => &text[i + cue.len()..],
        None => text,
    };
    let line = tail.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line
        .strip_prefix('"')
        .and_then(|l| l.strip_suffix('"'))
        .unwrap_or(line)
        .trim();
    (!line.is_empty()).then(|| line.to_string())
}

/// One deterministic masking call. A parse failure yields the original
/// question with `fallback` set.
pub fn mask_question(
    gateway: &Gateway,
    example: &BenchmarkExample,
    schema: &DbSchema,
    config: &RunConfig,
) -> Result<MaskedQuestion, GatewayError> {
    let prompt = build_mask_prompt(schema, None, &example.question, example.evidence());
    let request = LlmRequest::new(prompt, "mask")
        .samples(1, 0.0)
        .max_output_tokens(config.max_output_tokens);
    let completions = gateway.complete(&request)?;
    let parsed = completions.first().and_then(|c| parse_masked_answer(&c.raw_text));
    Ok(match parsed {
        Some(masked) => MaskedQuestion {
            original: example.question.clone(),
            masked,
            fallback: None,
        },
        None => MaskedQuestion::unmasked(&example.question, "unparseable masking answer"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub example_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: Option<String>,
    pub gold_sql: String,
    pub masked: MaskedQuestion,
    pub question_vec: EmbeddingVector,
    pub masked_vec: EmbeddingVector,
}

/// Embedded training questions. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleIndex {
    pub version: u32,
    pub embedding_model: String,
    pub dimension: usize,
    pub entries: Vec<IndexEntry>,
}

impl ExampleIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: ExampleIndex = read_json(path)?;
        if index.version != INDEX_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported index version {}",
                path.display(),
                index.version
            )));
        }
        if index.entries.iter().any(|e| {
            e.question_vec.dimension() != index.dimension || e.masked_vec.dimension() != index.dimension
        }) {
            return Err(Error::Data(format!("{}: vector dimension mismatch", path.display())));
        }
        Ok(index)
    }

    pub fn position(&self, example_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.example_id == example_id)
    }
}

/// Masks and embeds every training example. Masking failures fall back
/// to the raw question; embedding failures abort.
pub fn build_index(
    gateway: &Gateway,
    train: &[BenchmarkExample],
    schemas: &BTreeMap<String, DbSchema>,
    config: &RunConfig,
) -> Result<ExampleIndex> {
    if train.is_empty() {
        return Err(Error::Data("cannot build a few-shot index from an empty training split".into()));
    }
    let masked: Vec<MaskedQuestion> = train
        .par_iter()
        .map(|ex| {
            let Some(schema) = schemas.get(&ex.db_id) else {
                return MaskedQuestion::unmasked(&ex.question, format!("unknown database {}", ex.db_id));
            };
            mask_question(gateway, ex, schema, config)
                .unwrap_or_else(|e| MaskedQuestion::unmasked(&ex.question, e.to_string()))
        })
        .collect();
    let questions: Vec<String> = train.iter().map(|e| e.question.clone()).collect();
    let masked_texts: Vec<String> = masked.iter().map(|m| m.masked.clone()).collect();
    let question_vecs = gateway.embed(&questions)?;
    let masked_vecs = gateway.embed(&masked_texts)?;
    let dimension = question_vecs[0].dimension();
    if question_vecs.iter().chain(&masked_vecs).any(|v| v.dimension() != dimension) {
        return Err(Error::Data("embedding model returned vectors of different dimensions".into()));
    }
    let entries = train
        .iter()
        .zip(masked)
        .zip(question_vecs.into_iter().zip(masked_vecs))
        .map(|((ex, masked), (question_vec, masked_vec))| IndexEntry {
            example_id: ex.example_id.clone(),
            db_id: ex.db_id.clone(),
            question: ex.question.clone(),
            evidence: ex.evidence().map(str::to_string),
            gold_sql: ex.gold_sql.clone(),
            masked,
            question_vec,
            masked_vec,
        })
        .collect();
    Ok(ExampleIndex {
        version: INDEX_FORMAT_VERSION,
        embedding_model: gateway.embedding_model().to_string(),
        dimension,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Question,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    /// Position in the index.
    pub position: usize,
    pub example_id: String,
    pub similarity: f64,
}

/// Exact top-k by cosine similarity, descending, ties by example id
/// ascending. `exclude` is removed before ranking.
pub fn select_examples(
    index: &ExampleIndex,
    query: &EmbeddingVector,
    strategy: Strategy,
    k: usize,
    exclude: Option<&str>,
) -> Vec<Ranked> {
    let mut scored: Vec<Ranked> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| exclude != Some(e.example_id.as_str()))
        .map(|(position, e)| {
            let vec = match strategy {
                Strategy::Question => &e.question_vec,
                Strategy::Masked => &e.masked_vec,
            };
            Ranked {
                position,
                example_id: e.example_id.clone(),
                similarity: query.cosine(vec),
            }
        })
        .collect();
    let order = |a: &Ranked, b: &Ranked| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.example_id.cmp(&b.example_id))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotItem {
    pub example_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: Option<String>,
    pub gold_sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotList {
    pub variant_index: usize,
    pub recipe: String,
    pub items: Vec<FewShotItem>,
}

impl FewShotList {
    pub fn empty(variant_index: usize) -> Self {
        FewShotList {
            variant_index,
            recipe: "none".into(),
            items: Vec::new(),
        }
    }
}

fn recipe_name(variant: usize) -> String {
    let base = match variant % 5 {
        0 => "question",
        1 => "masked",
        2 => "interleave_question_first",
        3 => "interleave_masked_first",
        _ => "rank_sum",
    };
    if variant >= 5 {
        format!("{base}_reversed")
    } else {
        base.to_string()
    }
}

fn interleave(first: &[String], second: &[String], k: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(k);
    let mut seen = HashSet::new();
    let longest = first.len().max(second.len());
    for i in 0..longest {
        for list in [first, second] {
            if let Some(id) = list.get(i) {
                if out.len() < k && seen.insert(id.clone()) {
                    out.push(id.clone());
                }
            }
        }
    }
    out
}

fn rank_sum(q: &[String], mq: &[String], k: usize) -> Vec<String> {
    let rank = |list: &[String]| -> HashMap<String, usize> {
        list.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
    };
    let (rq, rmq) = (rank(q), rank(mq));
    let mut ids: Vec<String> = q.iter().chain(mq).cloned().collect::<HashSet<_>>().into_iter().collect();
    let score = |id: &String| rq.get(id).copied().unwrap_or(k) + rmq.get(id).copied().unwrap_or(k);
    ids.sort_by(|a, b| score(a).cmp(&score(b)).then_with(|| a.cmp(b)));
    ids.truncate(k);
    ids
}

/// Example-id list of variant `variant` given the two pure rankings.
pub fn compose_variant(q: &[String], mq: &[String], variant: usize, k: usize) -> Vec<String> {
    let dedup = |list: &[String]| {
        let mut seen = HashSet::new();
        list.iter()
            .filter(|id| seen.insert((*id).clone()))
            .take(k)
            .cloned()
            .collect::<Vec<_>>()
    };
    let mut ids = match variant % 5 {
        0 => dedup(q),
        1 => dedup(mq),
        2 => interleave(q, mq, k),
        3 => interleave(mq, q, k),
        _ => rank_sum(q, mq, k),
    };
    if variant >= 5 {
        ids.reverse();
    }
    ids
}

/// The `p_q` few-shot lists for one question. Without a masked-question
/// vector the masked ranking degrades to the question ranking.
pub fn make_prompt_variants(
    index: &ExampleIndex,
    example_id: &str,
    question_vec: &EmbeddingVector,
    masked_vec: Option<&EmbeddingVector>,
    k: usize,
    p_q: usize,
) -> Vec<FewShotList> {
    let ids = |ranked: Vec<Ranked>| ranked.into_iter().map(|r| r.example_id).collect::<Vec<_>>();
    let q = ids(select_examples(index, question_vec, Strategy::Question, k, Some(example_id)));
    let mq = match masked_vec {
        Some(v) => ids(select_examples(index, v, Strategy::Masked, k, Some(example_id))),
        None => q.clone(),
    };
    let by_id: HashMap<&str, &IndexEntry> = index.entries.iter().map(|e| (e.example_id.as_str(), e)).collect();
    (0..p_q)
        .map(|variant| FewShotList {
            variant_index: variant,
            recipe: recipe_name(variant),
            items: compose_variant(&q, &mq, variant, k)
                .into_iter()
                .map(|id| {
                    let e = by_id[id.as_str()];
                    FewShotItem {
                        example_id: e.example_id.clone(),
                        question: e.question.clone(),
                        evidence: e.evidence.clone(),
                        gold_sql: e.gold_sql.clone(),
                    }
                })
                .collect(),
        })
        .collect()
}
