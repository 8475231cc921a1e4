//! Run configuration.
//!
//! A run is described by one JSON document. Precedence is command-line
//! overrides, then the file, then the selected profile's defaults. The
//! `full` profile carries the standard hyperparameters; the `desk`
//! profile keeps those but shortens the execution timeout and switches to
//! the deterministic statement-step clock so runs are reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bench_data::Split;
use crate::error::{Error, Result};
use crate::exec::{ResultSemantics, TimingMode};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// OpenAI-compatible HTTP endpoint.
    Live,
    /// Fixtures first, live endpoint on a miss.
    Replay,
    /// Fixtures only; a miss is an error.
    StrictReplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Shuffled prompts for table linking.
    #[serde(rename = "p_t")]
    pub table_prompts: usize,
    /// Shuffled prompts for column linking.
    #[serde(rename = "p_c")]
    pub column_prompts: usize,
    /// Few-shot prompt variants for generation.
    #[serde(rename = "p_q")]
    pub generation_prompts: usize,
    /// Samples per prompt, for every sampled stage.
    #[serde(rename = "n")]
    pub samples: usize,
    /// Few-shot examples per prompt.
    #[serde(rename = "k")]
    pub few_shot_k: usize,
    /// Minimum confidence kept by candidate filtering.
    #[serde(alias = "T")]
    pub threshold: f64,
    pub temperature: f64,
    pub exec_timeout_ms: u64,
    pub sample_rows: usize,
    pub max_choices: usize,
    pub seed: u64,
    pub backend: Backend,
    pub chat_model: String,
    pub embedding_model: String,
    pub api_base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_output_tokens: u32,
    pub benchmark_root: PathBuf,
    pub train_split: Split,
    pub eval_split: Split,
    pub fixtures_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub runs_dir: PathBuf,
    /// Prebuilt few-shot index; built and saved here when missing.
    pub index_path: Option<PathBuf>,
    pub workers: usize,
    pub max_in_flight: usize,
    pub timing: TimingMode,
    pub ves_repeats: usize,
    pub result_semantics: ResultSemantics,
    pub max_unanswered_pct: f64,
    /// Use the full schema when every linking sample is unparseable.
    pub linking_fallback_full_schema: bool,
    pub use_schema_linking: bool,
    pub use_fewshot: bool,
    pub use_masked_similarity: bool,
    pub use_filtering: bool,
    pub use_mcs: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::full()
    }
}

impl RunConfig {
    pub fn full() -> Self {
        RunConfig {
            profile: Profile::Full,
            table_prompts: 3,
            column_prompts: 3,
            generation_prompts: 5,
            samples: 20,
            few_shot_k: 20,
            threshold: 0.2,
            temperature: 1.0,
            exec_timeout_ms: 180_000,
            sample_rows: 3,
            max_choices: 3,
            seed: 0,
            backend: Backend::Live,
            chat_model: "gpt-4".into(),
            embedding_model: "text-embedding-ada-002".into(),
            api_base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_output_tokens: 1024,
            benchmark_root: PathBuf::from("data/bird"),
            train_split: Split::Train,
            eval_split: Split::Dev,
            fixtures_dir: None,
            cache_dir: Some(PathBuf::from(".mcs-cache")),
            runs_dir: PathBuf::from("runs"),
            index_path: None,
            workers: 4,
            max_in_flight: 8,
            timing: TimingMode::Wall,
            ves_repeats: 3,
            result_semantics: ResultSemantics::Multiset,
            max_unanswered_pct: 50.0,
            linking_fallback_full_schema: true,
            use_schema_linking: true,
            use_fewshot: true,
            use_masked_similarity: true,
            use_filtering: true,
            use_mcs: true,
        }
    }

    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            exec_timeout_ms: 5_000,
            timing: TimingMode::VmSteps,
            backend: Backend::StrictReplay,
            cache_dir: None,
            ..RunConfig::full()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => RunConfig::full(),
            Profile::Desk => RunConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("p_t", self.table_prompts),
            ("p_c", self.column_prompts),
            ("p_q", self.generation_prompts),
            ("n", self.samples),
            ("k", self.few_shot_k),
            ("max_choices", self.max_choices),
            ("workers", self.workers),
            ("max_in_flight", self.max_in_flight),
            ("ves_repeats", self.ves_repeats),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.exec_timeout_ms == 0 {
            return Err(Error::Config("exec_timeout_ms must be positive".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::Config("max_output_tokens must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.max_unanswered_pct) {
            return Err(Error::Config("max_unanswered_pct must be in [0, 100]".into()));
        }
        if self.backend != Backend::Live && self.fixtures_dir.is_none() {
            return Err(Error::Config("replay backends need fixtures_dir".into()));
        }
        Ok(())
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        let Value::Object(map) = value else {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        };
        let mut config = RunConfig::from_map(map)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Profile defaults overlaid with `map`.
    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        let profile = match map.get("profile") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("bad profile: {e}")))?,
            None => Profile::Full,
        };
        let mut config = RunConfig::for_profile(profile);
        config.apply_overrides(&map)?;
        Ok(config)
    }

    /// Overlays keys from `overrides` onto this config.
    pub fn apply_overrides(&mut self, overrides: &Map<String, Value>) -> Result<()> {
        let Value::Object(mut current) = serde_json::to_value(&*self)? else {
            unreachable!("config serializes to an object");
        };
        for (key, value) in overrides {
            let key = if key == "T" { "threshold".to_string() } else { key.clone() };
            current.insert(key, value.clone());
        }
        *self = serde_json::from_value(Value::Object(current))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.benchmark_root);
        fix(&mut self.runs_dir);
        for p in [&mut self.fixtures_dir, &mut self.cache_dir, &mut self.index_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Digest of the serialized config; resumed runs must match it.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
