//! Access to a chat-completion model and an embedding model.
//!
//! [`Gateway`] sits in front of a [`LlmBackend`] and adds a
//! content-addressed response cache, per-tag call accounting and an
//! in-flight limit. Two backends exist: [`HttpBackend`] for
//! OpenAI-compatible endpoints and [`ReplayBackend`] for fixture
//! directories.

mod answer;
mod cache;
mod http;
mod replay;

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use answer::{parse_json_answer, single_code_block, AnswerParseError};
pub use cache::{cache_export, cache_import, cache_prune, cache_stats, CacheStats, ResponseCache, TagStats};
pub use http::{HttpBackend, RetryPolicy};
pub use replay::{token_hash_embedding, CompletionRule, EmbeddingFallback, EmbeddingRule, FixtureRules, ReplayBackend};

use crate::config::{Backend, RunConfig};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no replay fixture for {kind} request {key}")]
    FixtureMissing { kind: &'static str, key: String },
    #[error("cache i/o failure: {0}")]
    Cache(String),
}

/// One sampled chat request. `tag` names the pipeline stage; `variant`
/// is the prompt index within that stage. Neither takes part in the cache
/// key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: String,
    #[serde(default)]
    pub variant: Option<usize>,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>, tag: impl Into<String>) -> Self {
        LlmRequest {
            prompt: prompt.into(),
            n: 1,
            temperature: 0.0,
            max_output_tokens: 1024,
            tag: tag.into(),
            variant: None,
        }
    }

    pub fn samples(mut self, n: usize, temperature: f64) -> Self {
        self.n = n;
        self.temperature = temperature;
        self
    }

    pub fn max_output_tokens(mut self, tokens: u32) -> Self {
        self.max_output_tokens = tokens;
        self
    }

    pub fn variant(mut self, index: usize) -> Self {
        self.variant = Some(index);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.n == 0 {
            return Err(GatewayError::InvalidRequest("n must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("negative temperature".into()));
        }
        Ok(())
    }

    /// Hash of (prompt, n, temperature, model).
    pub fn cache_key(&self, model: &str) -> String {
        let canonical = serde_json::json!({
            "model": model,
            "n": self.n,
            "prompt": self.prompt,
            "temperature": self.temperature,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

pub(crate) fn embedding_key(text: &str, model: &str) -> String {
    let canonical = serde_json::json!({ "model": model, "text": text });
    sha256_hex(canonical.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCompletion {
    pub raw_text: String,
    pub parsed: Option<Map<String, Value>>,
    pub parse_error: Option<String>,
}

impl LlmCompletion {
    pub fn raw(text: impl Into<String>) -> Self {
        LlmCompletion {
            raw_text: text.into(),
            parsed: None,
            parse_error: None,
        }
    }

    /// Runs [`parse_json_answer`]; afterwards exactly one of `parsed` and
    /// `parse_error` is set.
    pub fn parse(mut self, required: &[&str]) -> Self {
        match parse_json_answer(&self.raw_text, required) {
            Ok(map) => {
                self.parsed = Some(map);
                self.parse_error = None;
            }
            Err(e) => {
                self.parsed = None;
                self.parse_error = Some(e.to_string());
            }
        }
        self
    }

    pub fn field_str(&self, field: &str) -> Option<&str> {
        self.parsed.as_ref()?.get(field)?.as_str()
    }
}

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm. Zero or non-finite input is rejected.
    pub fn normalized(values: Vec<f32>) -> Result<Self, GatewayError> {
        let norm = values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Protocol("embedding has zero or non-finite norm".into()));
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect(),
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; both vectors are unit length so this is the dot
    /// product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }
}

/// Something that can answer chat and embedding requests.
pub trait LlmBackend: Send + Sync {
    /// Up to `request.n` raw completion texts.
    fn complete(&self, request: &LlmRequest, model: &str) -> Result<Vec<String>, GatewayError>;
    /// One raw vector per input text, same order.
    fn embed(&self, texts: &[String], model: &str) -> Result<Vec<Vec<f32>>, GatewayError>;
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub backend_calls: usize,
    pub cache_hits: usize,
}

struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(slots: usize) -> Self {
        Limiter {
            available: Mutex::new(slots.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut slots = self.available.lock().expect("limiter poisoned");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("limiter poisoned");
        }
        *slots -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

const EMBED_BATCH: usize = 64;

/// Cached, rate-limited access to one chat model and one embedding model.
pub struct Gateway {
    backend: Box<dyn LlmBackend>,
    cache: ResponseCache,
    chat_model: String,
    embedding_model: String,
    counts: Mutex<BTreeMap<String, CallCounts>>,
    limiter: Limiter,
}

impl Gateway {
    pub fn new(
        backend: Box<dyn LlmBackend>,
        cache: ResponseCache,
        chat_model: impl Into<String>,
        embedding_model: impl Into<String>,
        max_in_flight: usize,
    ) -> Self {
        Gateway {
            backend,
            cache,
            chat_model: chat_model.into(),
            embedding_model: embedding_model.into(),
            counts: Mutex::new(BTreeMap::new()),
            limiter: Limiter::new(max_in_flight),
        }
    }

    /// Strict replay over in-memory `rules`, no disk cache.
    pub fn from_rules(rules: FixtureRules) -> Self {
        let backend = ReplayBackend::from_rules(rules);
        Gateway::new(Box::new(backend), ResponseCache::in_memory(), "replay-chat", "replay-embed", 4)
    }

    /// Builds the backend stack described by `config`.
    pub fn from_config(config: &RunConfig) -> crate::Result<Self> {
        let live = || -> crate::Result<Box<dyn LlmBackend>> {
            let key = std::env::var(&config.api_key_env).unwrap_or_default();
            Ok(Box::new(HttpBackend::new(&config.api_base_url, key, RetryPolicy::default())))
        };
        let fixtures = || {
            config
                .fixtures_dir
                .clone()
                .ok_or_else(|| crate::Error::Config("replay backend needs fixtures_dir".into()))
        };
        let backend: Box<dyn LlmBackend> = match config.backend {
            Backend::Live => live()?,
            Backend::Replay => Box::new(ReplayBackend::open(&fixtures()?)?.with_fallback(live()?)),
            Backend::StrictReplay => Box::new(ReplayBackend::open(&fixtures()?)?),
        };
        let cache = match &config.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir),
            None => ResponseCache::in_memory(),
        };
        Ok(Gateway::new(
            backend,
            cache,
            &config.chat_model,
            &config.embedding_model,
            config.max_in_flight,
        ))
    }

    pub fn chat_model(&self) -> &str {
        &self.chat_model
    }

    pub fn embedding_model(&self) -> &str {
        &self.embedding_model
    }

    fn count(&self, tag: &str, hit: bool) {
        let mut counts = self.counts.lock().expect("counter poisoned");
        let entry = counts.entry(tag.to_string()).or_default();
        if hit {
            entry.cache_hits += 1;
        } else {
            entry.backend_calls += 1;
        }
    }

    /// Up to `request.n` completions, unparsed. Identical requests are
    /// served from the cache without touching the backend.
    pub fn complete(&self, request: &LlmRequest) -> Result<Vec<LlmCompletion>, GatewayError> {
        request.validate()?;
        let key = request.cache_key(&self.chat_model);
        if let Some(texts) = self.cache.get_completions(&key)? {
            self.count(&request.tag, true);
            return Ok(texts.into_iter().map(LlmCompletion::raw).collect());
        }
        let texts = {
            let _slot = self.limiter.acquire();
            self.count(&request.tag, false);
            self.backend.complete(request, &self.chat_model)?
        };
        let mut texts = texts;
        texts.truncate(request.n);
        self.cache.put_completions(&key, request, &self.chat_model, &texts)?;
        Ok(texts.into_iter().map(LlmCompletion::raw).collect())
    }

    /// `complete` followed by [`LlmCompletion::parse`] on every sample.
    pub fn complete_parsed(&self, request: &LlmRequest, required: &[&str]) -> Result<Vec<LlmCompletion>, GatewayError> {
        Ok(self
            .complete(request)?
            .into_iter()
            .map(|c| c.parse(required))
            .collect())
    }

    /// One unit vector per text, same order; cached per text.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut missing: Vec<usize> = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = embedding_key(text, &self.embedding_model);
            match self.cache.get_embedding(&key)? {
                Some(values) => {
                    self.count("embed", true);
                    out[i] = Some(EmbeddingVector::normalized(values)?);
                }
                None => missing.push(i),
            }
        }
        // de-duplicate within the request so repeated texts cost one lookup
        let mut unique: Vec<usize> = Vec::new();
        for &i in &missing {
            if !unique.iter().any(|&u| texts[u] == texts[i]) {
                unique.push(i);
            }
        }
        for chunk in unique.chunks(EMBED_BATCH) {
            let batch: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
            let vectors = {
                let _slot = self.limiter.acquire();
                self.count("embed", false);
                self.backend.embed(&batch, &self.embedding_model)?
            };
            if vectors.len() != batch.len() {
                return Err(GatewayError::Protocol(format!(
                    "asked for {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for (text, values) in batch.iter().zip(vectors) {
                let vector = EmbeddingVector::normalized(values)?;
                let key = embedding_key(text, &self.embedding_model);
                self.cache.put_embedding(&key, text, &self.embedding_model, vector.values())?;
                for &i in &missing {
                    if &texts[i] == text {
                        out[i] = Some(vector.clone());
                    }
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
    }

    pub fn backend_calls(&self) -> usize {
        self.counts
            .lock()
            .expect("counter poisoned")
            .values()
            .map(|c| c.backend_calls)
            .sum()
    }

    pub fn backend_calls_for(&self, tag: &str) -> usize {
        self.counts
            .lock()
            .expect("counter poisoned")
            .get(tag)
            .map_or(0, |c| c.backend_calls)
    }

    pub fn call_counts(&self) -> BTreeMap<String, CallCounts> {
        self.counts.lock().expect("counter poisoned").clone()
    }
}
