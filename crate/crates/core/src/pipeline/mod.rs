//! Stage orchestration over a run directory.
//!
//! ```text
//! <run>/manifest.json         config snapshot, benchmark identity, stage markers, counters
//! <run>/link/<id>.json        linked schema and per-prompt linking traces
//! <run>/generate/<id>.json    few-shot variants and parsed candidates
//! <run>/exec/<id>.json        execution outcomes of the candidates
//! <run>/select/<id>.json      filtered pool, vote tally, fallback reason
//! <run>/predictions.json      BIRD-format predictions
//! <run>/eval/report.json      metrics (also report.txt and verdicts.csv)
//! <run>/variants/<name>/      select/, predictions.json and eval/ of a re-selection
//! ```
//!
//! Every stage skips examples whose artifact already exists, so an
//! interrupted stage resumes where it stopped. Workers compute in
//! parallel; artifacts are written by the calling thread only.

mod artifacts;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::SystemTime;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use artifacts::{read_predictions, write_predictions, ExecRecord, GenerateRecord, LinkRecord, SelectRecord};

use crate::bench_data::{load_benchmark, Benchmark, BenchmarkExample, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{linking_recall, score_examples, write_verdicts_csv, AblationRow, EvalReport};
use crate::exec::{ExecutionOutcome, Executor};
use crate::fewshot::{build_index, make_prompt_variants, mask_question, ExampleIndex, FewShotList};
use crate::generate::{generate_candidates, ExampleContext};
use crate::linking::{link_columns, link_tables, LinkedSchema};
use crate::llm::Gateway;
use crate::select::{funnel, select_final, FallbackReason, SelectionResult};
use crate::util::{file_stem, read_json, write_atomic, write_json_atomic};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Link,
    Generate,
    Select,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Link, Stage::Generate, Stage::Select, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Link => "link",
            Stage::Generate => "generate",
            Stage::Select => "select",
            Stage::Eval => "eval",
        }
    }

    fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Link => None,
            Stage::Generate => Some(Stage::Link),
            Stage::Select => Some(Stage::Generate),
            Stage::Eval => Some(Stage::Select),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkIdentity {
    pub root: PathBuf,
    pub split: Split,
    pub content_hash: String,
    pub example_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub threshold: f64,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub created_at: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub benchmark: BenchmarkIdentity,
    pub example_ids: Vec<String>,
    pub stages: BTreeMap<Stage, StageRecord>,
    #[serde(default)]
    pub variants: BTreeMap<String, VariantRecord>,
}

impl RunManifest {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|s| s.completed)
    }
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

/// Fresh directory name under `runs_dir`, timestamped.
fn new_run_dir(runs_dir: &Path) -> PathBuf {
    let stamp: String = now().chars().filter(|c| c.is_ascii_alphanumeric() || *c == '-').collect();
    let base = runs_dir.join(format!("run-{stamp}"));
    let mut dir = base.clone();
    let mut i = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    dir
}

/// Options for a selection pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectOptions {
    /// Overrides the run's threshold; requires `into`.
    pub threshold: Option<f64>,
    /// Write into `variants/<into>/` instead of the run's own artifacts.
    pub into: Option<String>,
}

pub struct Pipeline {
    config: RunConfig,
    benchmark: Benchmark,
    examples: Vec<BenchmarkExample>,
    gateway: Gateway,
    run_dir: PathBuf,
    manifest: RunManifest,
    index: Option<ExampleIndex>,
}

impl Pipeline {
    /// Starts a new run. `filter` restricts the run to the given example
    /// ids; `run_dir` defaults to a timestamped directory under
    /// `config.runs_dir`.
    pub fn create(config: RunConfig, gateway: Option<Gateway>, filter: Option<&[String]>, run_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let benchmark = load_benchmark(&config.benchmark_root, config.eval_split)?;
        let examples = match filter {
            None => benchmark.examples.clone(),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    benchmark
                        .example(id)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("unknown example id `{id}`")))
                })
                .collect::<Result<_>>()?,
        };
        let gateway = match gateway {
            Some(g) => g,
            None => Gateway::from_config(&config)?,
        };
        let run_dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| new_run_dir(&config.runs_dir));
        if run_dir.join("manifest.json").exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it instead",
                run_dir.display()
            )));
        }
        let manifest = RunManifest {
            version: MANIFEST_VERSION,
            created_at: now(),
            config_digest: config.digest(),
            config: config.clone(),
            benchmark: BenchmarkIdentity {
                root: benchmark.root.clone(),
                split: benchmark.split,
                content_hash: benchmark.content_hash.clone(),
                example_count: benchmark.examples.len(),
            },
            example_ids: examples.iter().map(|e| e.example_id.clone()).collect(),
            stages: BTreeMap::new(),
            variants: BTreeMap::new(),
        };
        let pipeline = Pipeline {
            config,
            benchmark,
            examples,
            gateway,
            run_dir,
            manifest,
            index: None,
        };
        pipeline.save_manifest()?;
        Ok(pipeline)
    }

    /// Reopens a run. When `expected` is given its digest must match the
    /// manifest's config.
    pub fn open(run_dir: &Path, gateway: Option<Gateway>, expected: Option<&RunConfig>) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::Prerequisite(format!("no manifest in {}", run_dir.display())));
        }
        let manifest: RunManifest = read_json(&path)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", manifest.version)));
        }
        if let Some(cfg) = expected {
            if cfg.digest() != manifest.config_digest {
                return Err(Error::Config(format!(
                    "config does not match the manifest of {}",
                    run_dir.display()
                )));
            }
        }
        let config = manifest.config.clone();
        let benchmark = load_benchmark(&manifest.benchmark.root, manifest.benchmark.split)?;
        if benchmark.content_hash != manifest.benchmark.content_hash {
            return Err(Error::Data(format!(
                "benchmark under {} changed since the run started",
                manifest.benchmark.root.display()
            )));
        }
        let examples = manifest
            .example_ids
            .iter()
            .map(|id| {
                benchmark
                    .example(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("example `{id}` vanished from the benchmark")))
            })
            .collect::<Result<_>>()?;
        let gateway = match gateway {
            Some(g) => g,
            None => Gateway::from_config(&config)?,
        };
        Ok(Pipeline {
            config,
            benchmark,
            examples,
            gateway,
            run_dir: run_dir.to_path_buf(),
            manifest,
            index: None,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn examples(&self) -> &[BenchmarkExample] {
        &self.examples
    }

    /// Marks `stage` and everything after it incomplete.
    pub fn invalidate_from(&mut self, stage: Stage) -> Result<()> {
        for (s, rec) in self.manifest.stages.iter_mut() {
            if *s >= stage {
                rec.completed = false;
            }
        }
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        write_json_atomic(&self.run_dir.join("manifest.json"), &self.manifest)
    }

    fn artifact(&self, base: &Path, stage: &str, example_id: &str) -> PathBuf {
        base.join(stage).join(format!("{}.json", file_stem(example_id)))
    }

    fn require(&self, stage: Stage) -> Result<()> {
        match stage.prerequisite() {
            Some(prev) if !self.manifest.is_complete(prev) => Err(Error::Prerequisite(format!(
                "stage `{stage}` needs a completed `{prev}` stage in {}",
                self.run_dir.display()
            ))),
            _ => Ok(()),
        }
    }

    fn begin(&mut self, stage: Stage) -> Result<()> {
        self.require(stage)?;
        let rec = self.manifest.stages.entry(stage).or_default();
        rec.completed = false;
        rec.started_at = now();
        rec.finished_at = None;
        self.save_manifest()
    }

    fn finish(&mut self, stage: Stage, counters: BTreeMap<String, u64>) -> Result<()> {
        let rec = self.manifest.stages.entry(stage).or_default();
        rec.completed = true;
        rec.finished_at = Some(now());
        rec.counters = counters;
        self.save_manifest()
    }

    /// Computes `work` for every example without an artifact at
    /// `<base>/<stage>/<id>.json`, in parallel chunks, writing results in
    /// example order.
    fn process<R, F>(&self, base: &Path, stage: &str, work: F) -> Result<()>
    where
        R: Serialize + Send,
        F: Fn(&BenchmarkExample) -> Result<R> + Sync,
    {
        let pending: Vec<&BenchmarkExample> = self
            .examples
            .iter()
            .filter(|e| !self.artifact(base, stage, &e.example_id).exists())
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        for chunk in pending.chunks(self.config.workers * 2) {
            let results: Vec<Result<R>> = pool.install(|| chunk.par_iter().map(|e| work(e)).collect());
            for (ex, result) in chunk.iter().zip(results) {
                write_json_atomic(&self.artifact(base, stage, &ex.example_id), &result?)?;
            }
        }
        Ok(())
    }

    fn read_all<T: serde::de::DeserializeOwned>(&self, base: &Path, stage: &str) -> Result<Vec<T>> {
        self.examples
            .iter()
            .map(|e| {
                let path = self.artifact(base, stage, &e.example_id);
                if !path.exists() {
                    return Err(Error::Prerequisite(format!("missing artifact {}", path.display())));
                }
                read_json(&path)
            })
            .collect()
    }

    fn read_one<T: serde::de::DeserializeOwned>(&self, stage: &str, example_id: &str) -> Result<T> {
        let path = self.artifact(&self.run_dir, stage, example_id);
        if !path.exists() {
            return Err(Error::Prerequisite(format!("missing artifact {}", path.display())));
        }
        read_json(&path)
    }

    // ---- link ----

    pub fn link(&mut self) -> Result<()> {
        self.begin(Stage::Link)?;
        let base = self.run_dir.clone();
        self.process(&base, "link", |ex| Ok(self.link_one(ex)))?;
        let records: Vec<LinkRecord> = self.read_all(&base, "link")?;
        let mut c = BTreeMap::new();
        c.insert("examples".into(), records.len() as u64);
        c.insert("errors".into(), records.iter().filter(|r| r.error.is_some()).count() as u64);
        c.insert("unlinked".into(), records.iter().filter(|r| r.linked.is_none()).count() as u64);
        c.insert("full_schema_fallbacks".into(), records.iter().filter(|r| r.full_schema_fallback).count() as u64);
        c.insert("all_tables_fallbacks".into(), records.iter().filter(|r| r.all_tables_fallback).count() as u64);
        c.insert(
            "all_columns_fallbacks".into(),
            records.iter().map(|r| r.all_columns_fallback.len() as u64).sum(),
        );
        c.insert("forced_columns".into(), records.iter().map(|r| r.forced_columns.len() as u64).sum());
        c.insert(
            "unparseable_samples".into(),
            records.iter().flat_map(|r| &r.traces).map(|t| t.unparseable as u64).sum(),
        );
        self.finish(Stage::Link, c)
    }

    fn link_one(&self, ex: &BenchmarkExample) -> LinkRecord {
        let mut record = LinkRecord {
            example_id: ex.example_id.clone(),
            linked: None,
            skipped: false,
            full_schema_fallback: false,
            all_tables_fallback: false,
            all_columns_fallback: Vec::new(),
            forced_columns: Vec::new(),
            traces: Vec::new(),
            error: None,
        };
        let schema = match self.benchmark.schema(&ex.db_id) {
            Ok(s) => s,
            Err(e) => {
                record.error = Some(e.to_string());
                return record;
            }
        };
        if !self.config.use_schema_linking {
            record.skipped = true;
            record.linked = Some(LinkedSchema::full(schema));
            return record;
        }
        let linked = link_tables(&self.gateway, ex, schema, &self.config).and_then(|t| {
            record.all_tables_fallback = t.all_tables_fallback;
            record.traces.extend(t.traces);
            link_columns(&self.gateway, ex, schema, &t.tables, &self.config)
        });
        match linked {
            Ok(c) => {
                record.traces.extend(c.traces);
                record.forced_columns = c.forced_columns;
                record.all_columns_fallback = c.all_columns_fallback;
                record.linked = Some(c.linked);
            }
            Err(e) => {
                tracing::warn!(example = %ex.example_id, "{e}");
                record.error = Some(e.to_string());
                if self.config.linking_fallback_full_schema {
                    record.full_schema_fallback = true;
                    record.linked = Some(LinkedSchema::full(schema));
                }
            }
        }
        record
    }

    // ---- generate ----

    /// The few-shot index: loaded from `index_path` when present, built
    /// from the training split (and saved there) otherwise.
    fn ensure_index(&mut self) -> Result<()> {
        if self.index.is_some() || !self.config.use_fewshot {
            return Ok(());
        }
        if let Some(path) = &self.config.index_path {
            if path.exists() {
                let index = ExampleIndex::load(path)?;
                if index.embedding_model != self.gateway.embedding_model() {
                    return Err(Error::Config(format!(
                        "index at {} was built with `{}`, not `{}`",
                        path.display(),
                        index.embedding_model,
                        self.gateway.embedding_model()
                    )));
                }
                self.index = Some(index);
                return Ok(());
            }
        }
        let train = load_benchmark(&self.config.benchmark_root, self.config.train_split)?;
        let index = build_index(&self.gateway, &train.examples, &train.schemas, &self.config)?;
        if let Some(path) = &self.config.index_path {
            index.save(path)?;
        }
        self.index = Some(index);
        Ok(())
    }

    pub fn generate(&mut self) -> Result<()> {
        self.begin(Stage::Generate)?;
        self.ensure_index()?;
        let base = self.run_dir.clone();
        self.process(&base, "generate", |ex| self.generate_one(ex))?;
        let records: Vec<GenerateRecord> = self.read_all(&base, "generate")?;
        let gens: Vec<&crate::generate::Generation> = records.iter().filter_map(|r| r.generation.as_ref()).collect();
        let mut c = BTreeMap::new();
        c.insert("examples".into(), records.len() as u64);
        c.insert("errors".into(), records.iter().filter(|r| r.error.is_some()).count() as u64);
        c.insert(
            "masking_fallbacks".into(),
            records
                .iter()
                .filter(|r| r.masked.as_ref().is_some_and(|m| m.fallback.is_some()))
                .count() as u64,
        );
        c.insert("candidates".into(), gens.iter().map(|g| g.candidates.len() as u64).sum());
        for (name, get) in [
            ("unparseable", (|d: &crate::generate::DropCounts| d.unparseable) as fn(&_) -> usize),
            ("empty_sql", |d| d.empty_sql),
            ("multi_statement", |d| d.multi_statement),
            ("salvaged", |d| d.salvaged),
            ("failed_prompts", |d| d.failed_prompts),
        ] {
            c.insert(name.into(), gens.iter().map(|g| get(&g.drops) as u64).sum());
        }
        self.finish(Stage::Generate, c)
    }

    fn generate_one(&self, ex: &BenchmarkExample) -> Result<GenerateRecord> {
        let link: LinkRecord = self.read_one("link", &ex.example_id)?;
        let mut record = GenerateRecord {
            example_id: ex.example_id.clone(),
            masked: None,
            variants: Vec::new(),
            generation: None,
            error: None,
        };
        let Some(linked) = link.linked else {
            record.error = Some("no linked schema".into());
            return Ok(record);
        };
        let schema = self.benchmark.schema(&ex.db_id)?;
        let db_path = self.benchmark.db_path(&ex.db_id)?;
        match self.variants_for(ex, &mut record) {
            Ok(v) => record.variants = v,
            Err(e) => {
                record.error = Some(e.to_string());
                return Ok(record);
            }
        }
        let ctx = ExampleContext {
            example: ex,
            schema,
            linked: &linked,
            db_path,
        };
        match generate_candidates(&self.gateway, &ctx, &record.variants, &self.config) {
            Ok(g) => record.generation = Some(g),
            Err(e) => {
                tracing::warn!(example = %ex.example_id, "{e}");
                record.error = Some(e.to_string());
            }
        }
        Ok(record)
    }

    /// Few-shot lists for `ex`. Without few-shot there is one zero-shot
    /// prompt, since identical prompts would share cached samples.
    fn variants_for(&self, ex: &BenchmarkExample, record: &mut GenerateRecord) -> Result<Vec<FewShotList>> {
        let Some(index) = &self.index else {
            return Ok(vec![FewShotList::empty(0)]);
        };
        let question_vec = self
            .gateway
            .embed(std::slice::from_ref(&ex.question))?
            .remove(0);
        let mut masked_vec = None;
        if self.config.use_masked_similarity {
            let schema = self.benchmark.schema(&ex.db_id)?;
            let masked = mask_question(&self.gateway, ex, schema, &self.config)
                .unwrap_or_else(|e| crate::fewshot::MaskedQuestion::unmasked(&ex.question, e.to_string()));
            if masked.fallback.is_none() {
                masked_vec = Some(self.gateway.embed(std::slice::from_ref(&masked.masked))?.remove(0));
            }
            record.masked = Some(masked);
        }
        Ok(make_prompt_variants(
            index,
            &ex.example_id,
            &question_vec,
            masked_vec.as_ref(),
            self.config.few_shot_k,
            self.config.generation_prompts,
        ))
    }

    // ---- select ----

    fn variant_dir(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty() || file_stem(name) != name {
            return Err(Error::Config(format!(
                "variant name `{name}` may only use letters, digits, `-`, `_` and `.`"
            )));
        }
        Ok(self.run_dir.join("variants").join(name))
    }

    pub fn select(&mut self, opts: &SelectOptions) -> Result<()> {
        let threshold = opts.threshold.unwrap_or(self.config.threshold);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {threshold}")));
        }
        let base = match &opts.into {
            Some(name) => self.variant_dir(name)?,
            None if threshold != self.config.threshold => {
                return Err(Error::Config(
                    "selecting with a different threshold needs a variant name (--into)".into(),
                ))
            }
            None => self.run_dir.clone(),
        };
        if opts.into.is_some() {
            self.require(Stage::Select)?;
        } else {
            self.begin(Stage::Select)?;
        }
        // selection always reruns in full
        let _ = std::fs::remove_dir_all(base.join("select"));
        let mut config = self.config.clone();
        config.threshold = threshold;
        self.write_missing_exec()?;
        self.process(&base, "select", |ex| self.select_one(ex, &config))?;
        let records: Vec<SelectRecord> = self.read_all(&base, "select")?;
        let predictions: Vec<(String, String, Option<String>)> = records
            .iter()
            .map(|r| (r.example_id.clone(), r.db_id.clone(), r.result.final_sql.clone()))
            .collect();
        write_predictions(&base.join("predictions.json"), &predictions)?;

        let mut c = BTreeMap::new();
        c.insert("examples".into(), records.len() as u64);
        c.insert("answered".into(), records.iter().filter(|r| r.result.final_sql.is_some()).count() as u64);
        for reason in [
            FallbackReason::EmptyPool,
            FallbackReason::SingleCandidate,
            FallbackReason::NoVoteMatch,
            FallbackReason::BelowThresholdFallback,
            FallbackReason::GatewayFailure,
        ] {
            let key = serde_json::to_value(reason)?.as_str().unwrap_or_default().to_string();
            c.insert(key, records.iter().filter(|r| r.result.fallback_reason == Some(reason)).count() as u64);
        }
        c.insert("truncated".into(), records.iter().map(|r| r.result.truncated as u64).sum());
        match &opts.into {
            Some(name) => {
                self.manifest.variants.insert(
                    name.clone(),
                    VariantRecord {
                        threshold,
                        created_at: now(),
                    },
                );
                self.save_manifest()
            }
            None => self.finish(Stage::Select, c),
        }
    }

    /// Executes the candidates of every example that has no matching
    /// execution record yet.
    fn write_missing_exec(&self) -> Result<()> {
        let executor = Executor::from_config(&self.config);
        let base = self.run_dir.clone();
        let stale: Vec<PathBuf> = self
            .examples
            .iter()
            .map(|e| self.artifact(&base, "exec", &e.example_id))
            .filter(|p| {
                p.exists()
                    && read_json::<ExecRecord>(p).map_or(true, |r| {
                        r.timeout_ms != self.config.exec_timeout_ms
                            || r.timing != self.config.timing
                            || r.semantics != self.config.result_semantics
                    })
            })
            .collect();
        for p in stale {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.process(&base, "exec", |ex| {
            let gen: GenerateRecord = self.read_one("generate", &ex.example_id)?;
            let candidates = gen.generation.map(|g| g.candidates).unwrap_or_default();
            let outcomes: Vec<ExecutionOutcome> = match self.benchmark.db_path(&ex.db_id) {
                Ok(db) => candidates.par_iter().map(|c| executor.execute(db, &c.sql)).collect(),
                Err(_) => Vec::new(),
            };
            Ok(ExecRecord {
                example_id: ex.example_id.clone(),
                timeout_ms: executor.timeout.as_millis() as u64,
                timing: executor.timing,
                semantics: executor.semantics,
                outcomes,
            })
        })
    }

    fn select_one(&self, ex: &BenchmarkExample, config: &RunConfig) -> Result<SelectRecord> {
        let gen: GenerateRecord = self.read_one("generate", &ex.example_id)?;
        let link: LinkRecord = self.read_one("link", &ex.example_id)?;
        let exec: ExecRecord = self.read_one("exec", &ex.example_id)?;
        let candidates = gen.generation.map(|g| g.candidates).unwrap_or_default();
        if candidates.len() != exec.outcomes.len() {
            return Err(Error::Data(format!(
                "execution record of {} does not match its candidates",
                ex.example_id
            )));
        }
        let pool = funnel(&candidates, &exec.outcomes, config.threshold, config.use_filtering);
        let mut record = SelectRecord {
            example_id: ex.example_id.clone(),
            db_id: ex.db_id.clone(),
            threshold: config.threshold,
            use_filtering: config.use_filtering,
            filtered: pool.filtered.kept.clone(),
            result: SelectionResult::empty(pool.sizes),
        };
        let (Some(linked), Ok(schema), Ok(db_path)) = (
            link.linked.as_ref(),
            self.benchmark.schema(&ex.db_id),
            self.benchmark.db_path(&ex.db_id),
        ) else {
            return Ok(record);
        };
        let ctx = ExampleContext {
            example: ex,
            schema,
            linked,
            db_path,
        };
        let shots = gen.variants.first().cloned().unwrap_or_else(|| FewShotList::empty(0));
        record.result = select_final(&self.gateway, &pool, &ctx, &shots, config)?;
        Ok(record)
    }

    // ---- eval ----

    /// Scores the run's predictions, or a variant's when `variant` is set.
    pub fn eval(&mut self, variant: Option<&str>) -> Result<EvalReport> {
        let base = match variant {
            Some(name) => {
                if !self.manifest.variants.contains_key(name) {
                    return Err(Error::Prerequisite(format!("no variant `{name}` in {}", self.run_dir.display())));
                }
                self.variant_dir(name)?
            }
            None => {
                self.begin(Stage::Eval)?;
                self.run_dir.clone()
            }
        };
        let predictions = read_predictions(&base.join("predictions.json"))?;
        let verdicts = score_examples(&predictions, &self.examples, &self.benchmark.db_paths, &self.config);
        let base_dir = self.run_dir.clone();
        let linked: BTreeMap<String, LinkedSchema> = self
            .read_all::<LinkRecord>(&base_dir, "link")?
            .into_iter()
            .filter_map(|r| Some((r.example_id, r.linked?)))
            .collect();
        let recall = linking_recall(&linked, &self.examples, &self.benchmark.schemas);
        let report = EvalReport::from_verdicts(&verdicts, Some(&recall));
        let eval_dir = base.join("eval");
        write_json_atomic(&eval_dir.join("report.json"), &report)?;
        write_atomic(&eval_dir.join("report.txt"), report.to_text().as_bytes())?;
        write_verdicts_csv(&eval_dir.join("verdicts.csv"), &verdicts)?;
        if variant.is_none() {
            let mut c = BTreeMap::new();
            c.insert("examples".into(), self.examples.len() as u64);
            c.insert("matched".into(), report.matched as u64);
            c.insert("unanswered".into(), report.unanswered as u64);
            c.insert("gold_failures".into(), report.gold_failures.len() as u64);
            self.finish(Stage::Eval, c)?;
        }
        Ok(report)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Link => self.link(),
            Stage::Generate => self.generate(),
            Stage::Select => self.select(&SelectOptions::default()),
            Stage::Eval => self.eval(None).map(|_| ()),
        }
    }

    /// Runs every stage that is not complete yet and returns the report.
    pub fn run_all(&mut self) -> Result<EvalReport> {
        for stage in [Stage::Link, Stage::Generate, Stage::Select] {
            if !self.manifest.is_complete(stage) {
                tracing::info!(stage = %stage, "running");
                self.run_stage(stage)?;
            }
        }
        if self.manifest.is_complete(Stage::Eval) {
            let path = self.run_dir.join("eval").join("report.json");
            if path.exists() {
                return read_json(&path);
            }
        }
        self.eval(None)
    }

    /// Fails when more examples went unanswered than the config allows.
    pub fn check_budget(&self, report: &EvalReport) -> Result<()> {
        let total = self.examples.len();
        if total == 0 {
            return Ok(());
        }
        let pct = 100.0 * report.unanswered as f64 / total as f64;
        if pct > self.config.max_unanswered_pct {
            return Err(Error::UnansweredBudget {
                unanswered: report.unanswered,
                total,
                limit_pct: self.config.max_unanswered_pct,
            });
        }
        Ok(())
    }
}

/// One named config override for an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDelta {
    pub name: String,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

/// Runs the pipeline once per delta under `parent/<name>` and reports EX
/// per configuration. A failing configuration yields an error row.
pub fn ablation_run(
    base: &RunConfig,
    deltas: &[ConfigDelta],
    parent: &Path,
    make_gateway: &dyn Fn(&RunConfig) -> Result<Gateway>,
) -> Vec<AblationRow> {
    deltas
        .iter()
        .map(|delta| {
            let outcome = (|| -> Result<EvalReport> {
                let mut config = base.clone();
                config.apply_overrides(&delta.overrides)?;
                config.validate()?;
                let gateway = make_gateway(&config)?;
                let dir = parent.join(file_stem(&delta.name));
                let mut pipeline = Pipeline::create(config, Some(gateway), None, Some(&dir))?;
                let report = pipeline.run_all()?;
                pipeline.check_budget(&report)?;
                Ok(report)
            })();
            match outcome {
                Ok(report) => AblationRow {
                    name: delta.name.clone(),
                    ex: Some(report.ex_overall),
                    error: None,
                },
                Err(e) => AblationRow {
                    name: delta.name.clone(),
                    ex: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}
