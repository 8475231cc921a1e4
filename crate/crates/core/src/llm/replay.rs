//! File-based replay backend.
//!
//! A fixture directory (format version 1) may contain:
//!
//! ```text
//! fixtures.json              {"format": "mcs-sql-replay", "version": 1}   (optional)
//! completions/<sha256>.json  recorded completions, keyed by request hash
//! embeddings/<sha256>.json   recorded vectors, keyed by (model, text) hash
//! rules.json                 hand-written rules, consulted after the hash entries
//! ```
//!
//! Hash-keyed entries are exactly what an on-disk cache holds, so
//! `cache export` produces a valid fixture directory. Rules make small
//! hand-authored fixtures possible: a completion rule matches on stage
//! tag, optional prompt index, and substrings of the prompt; the first
//! matching rule wins.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::cache::{completion_path, embedding_path, read_record, CompletionRecord, EmbeddingRecord};
use super::{embedding_key, GatewayError, LlmBackend, LlmRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRule {
    pub tag: String,
    /// Every substring must occur in the prompt.
    #[serde(default)]
    pub contains: Vec<String>,
    /// None of these may occur in the prompt.
    #[serde(default)]
    pub excludes: Vec<String>,
    /// Restrict to one prompt index of the stage.
    #[serde(default)]
    pub variant: Option<usize>,
    /// Strings are used verbatim; any other JSON value is serialized.
    pub responses: Vec<Value>,
    /// Repeat `responses` until `n` samples are produced.
    #[serde(default)]
    pub cycle: bool,
}

impl CompletionRule {
    fn matches(&self, request: &LlmRequest) -> bool {
        self.tag == request.tag
            && self.variant.is_none_or(|v| request.variant == Some(v))
            && self.contains.iter().all(|s| request.prompt.contains(s.as_str()))
            && !self.excludes.iter().any(|s| request.prompt.contains(s.as_str()))
    }

    fn texts(&self, n: usize) -> Vec<String> {
        let texts: Vec<String> = self
            .responses
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        if self.cycle && !texts.is_empty() {
            texts.iter().cycle().take(n).cloned().collect()
        } else {
            texts.into_iter().take(n).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRule {
    pub text: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingFallback {
    /// Deterministic bag-of-words vector, see [`token_hash_embedding`].
    TokenHash { dimension: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureRules {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub completions: Vec<CompletionRule>,
    #[serde(default)]
    pub embeddings: Vec<EmbeddingRule>,
    #[serde(default)]
    pub embedding_fallback: Option<EmbeddingFallback>,
}

fn default_version() -> u32 {
    1
}

pub struct ReplayBackend {
    dir: Option<PathBuf>,
    rules: FixtureRules,
    fallback: Option<Box<dyn LlmBackend>>,
}

impl ReplayBackend {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("fixture directory {} does not exist", dir.display())));
        }
        let rules_path = dir.join("rules.json");
        let rules = if rules_path.is_file() {
            let text = std::fs::read_to_string(&rules_path).map_err(|e| Error::io(&rules_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(&rules_path, &e))?
        } else {
            FixtureRules::default()
        };
        if rules.version != 1 {
            return Err(Error::Config(format!("unsupported fixture version {}", rules.version)));
        }
        Ok(ReplayBackend {
            dir: Some(dir.to_path_buf()),
            rules,
            fallback: None,
        })
    }

    /// Recorded entries under `dir` plus the given rules.
    pub fn in_dir(dir: &Path, rules: FixtureRules) -> Self {
        ReplayBackend {
            dir: Some(dir.to_path_buf()),
            rules,
            fallback: None,
        }
    }

    /// Rules only, without a directory of recorded entries.
    pub fn from_rules(rules: FixtureRules) -> Self {
        ReplayBackend {
            dir: None,
            rules,
            fallback: None,
        }
    }

    /// Misses go to `backend` instead of failing.
    pub fn with_fallback(mut self, backend: Box<dyn LlmBackend>) -> Self {
        self.fallback = Some(backend);
        self
    }

    fn lookup_embedding(&self, text: &str, model: &str) -> Option<Vec<f32>> {
        if let Some(dir) = &self.dir {
            let key = embedding_key(text, model);
            if let Some(record) = read_record::<EmbeddingRecord>(&embedding_path(dir, &key)) {
                return Some(record.vector);
            }
        }
        if let Some(rule) = self.rules.embeddings.iter().find(|r| r.text == text) {
            return Some(rule.vector.clone());
        }
        self.rules
            .embedding_fallback
            .map(|EmbeddingFallback::TokenHash { dimension }| token_hash_embedding(text, dimension))
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &LlmRequest, model: &str) -> Result<Vec<String>, GatewayError> {
        let key = request.cache_key(model);
        if let Some(dir) = &self.dir {
            if let Some(record) = read_record::<CompletionRecord>(&completion_path(dir, &key)) {
                return Ok(record.completions.into_iter().take(request.n).collect());
            }
        }
        if let Some(rule) = self.rules.completions.iter().find(|r| r.matches(request)) {
            return Ok(rule.texts(request.n));
        }
        match &self.fallback {
            Some(backend) => backend.complete(request, model),
            None => Err(GatewayError::FixtureMissing {
                kind: "completion",
                key: format!("{key} (tag {}, variant {:?})", request.tag, request.variant),
            }),
        }
    }

    fn embed(&self, texts: &[String], model: &str) -> Result<Vec<Vec<f32>>, GatewayError> {
        let mut out = Vec::with_capacity(texts.len());
        let mut misses = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            match self.lookup_embedding(text, model) {
                Some(v) => out.push(Some(v)),
                None => {
                    out.push(None);
                    misses.push(i);
                }
            }
        }
        if !misses.is_empty() {
            let Some(backend) = &self.fallback else {
                return Err(GatewayError::FixtureMissing {
                    kind: "embedding",
                    key: embedding_key(&texts[misses[0]], model),
                });
            };
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let fetched = backend.embed(&batch, model)?;
            for (i, v) in misses.into_iter().zip(fetched) {
                out[i] = Some(v);
            }
        }
        out.into_iter()
            .map(|v| v.ok_or_else(|| GatewayError::Protocol("fallback returned too few embeddings".into())))
            .collect()
    }
}

/// Offline embedding: lowercase word tokens (placeholders such as
/// `[VALUE]` count as one token) hashed into `dimension` buckets with a
/// sign bit, then unit-normalized by the gateway. Texts sharing words get
/// positive cosine similarity; the mapping is fixed across platforms.
pub fn token_hash_embedding(text: &str, dimension: usize) -> Vec<f32> {
    let dimension = dimension.max(1);
    let mut vector = vec![0f32; dimension];
    let lower = text.to_lowercase();
    let mut tokens: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut in_bracket = false;
    for c in lower.chars() {
        if c == '[' {
            flush(&mut current, &mut tokens);
            in_bracket = true;
            current.push(c);
        } else if c == ']' && in_bracket {
            current.push(c);
            in_bracket = false;
            flush(&mut current, &mut tokens);
        } else if c.is_alphanumeric() || c == '_' {
            current.push(c);
        } else {
            if !in_bracket {
                flush(&mut current, &mut tokens);
            } else {
                current.push(c);
            }
        }
    }
    flush(&mut current, &mut tokens);
    for token in &tokens {
        let digest = Sha256::digest(token.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % dimension as u64;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        vector[bucket as usize] += sign;
    }
    if vector.iter().all(|v| *v == 0.0) {
        vector[0] = 1.0;
    }
    vector
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}
