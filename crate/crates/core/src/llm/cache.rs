//! Content-addressed response store.
//!
//! Layout, shared with replay fixture directories:
//!
//! ```text
//! <dir>/completions/<sha256>.json   CompletionRecord
//! <dir>/embeddings/<sha256>.json    EmbeddingRecord
//! ```
//!
//! Each record carries the request metadata next to the payload so a cache
//! can be audited, pruned by stage tag, or shipped as a replay bundle.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GatewayError, LlmRequest};
use crate::util::write_json_atomic;

pub(crate) const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct CompletionRecord {
    pub version: u32,
    pub key: String,
    pub model: String,
    pub tag: String,
    pub n: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub prompt: String,
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct EmbeddingRecord {
    pub version: u32,
    pub key: String,
    pub model: String,
    pub text: String,
    pub vector: Vec<f32>,
}

pub struct ResponseCache {
    dir: Option<PathBuf>,
    completions: Mutex<HashMap<String, Vec<String>>>,
    embeddings: Mutex<HashMap<String, Vec<f32>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            completions: Mutex::new(HashMap::new()),
            embeddings: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: &Path) -> Self {
        ResponseCache {
            dir: Some(dir.to_path_buf()),
            ..ResponseCache::in_memory()
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub(crate) fn get_completions(&self, key: &str) -> Result<Option<Vec<String>>, GatewayError> {
        if let Some(hit) = self.completions.lock().expect("cache poisoned").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        let Some(record) = read_record::<CompletionRecord>(&completion_path(dir, key)) else {
            return Ok(None);
        };
        self.completions
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), record.completions.clone());
        Ok(Some(record.completions))
    }

    pub(crate) fn put_completions(
        &self,
        key: &str,
        request: &LlmRequest,
        model: &str,
        texts: &[String],
    ) -> Result<(), GatewayError> {
        self.completions
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), texts.to_vec());
        if let Some(dir) = &self.dir {
            let record = CompletionRecord {
                version: RECORD_VERSION,
                key: key.to_string(),
                model: model.to_string(),
                tag: request.tag.clone(),
                n: request.n,
                temperature: request.temperature,
                max_output_tokens: request.max_output_tokens,
                prompt: request.prompt.clone(),
                completions: texts.to_vec(),
            };
            write_json_atomic(&completion_path(dir, key), &record).map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        Ok(())
    }

    pub(crate) fn get_embedding(&self, key: &str) -> Result<Option<Vec<f32>>, GatewayError> {
        if let Some(hit) = self.embeddings.lock().expect("cache poisoned").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        let Some(record) = read_record::<EmbeddingRecord>(&embedding_path(dir, key)) else {
            return Ok(None);
        };
        self.embeddings
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), record.vector.clone());
        Ok(Some(record.vector))
    }

    pub(crate) fn put_embedding(&self, key: &str, text: &str, model: &str, vector: &[f32]) -> Result<(), GatewayError> {
        self.embeddings
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), vector.to_vec());
        if let Some(dir) = &self.dir {
            let record = EmbeddingRecord {
                version: RECORD_VERSION,
                key: key.to_string(),
                model: model.to_string(),
                text: text.to_string(),
                vector: vector.to_vec(),
            };
            write_json_atomic(&embedding_path(dir, key), &record).map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

pub(crate) fn completion_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("completions").join(format!("{key}.json"))
}

pub(crate) fn embedding_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("embeddings").join(format!("{key}.json"))
}

/// Missing or unreadable records count as a miss.
pub(crate) fn read_record<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagStats {
    pub entries: usize,
    pub bytes: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Completion records grouped by stage tag.
    pub completions: BTreeMap<String, TagStats>,
    pub embeddings: TagStats,
    /// Files that failed to parse, relative to the cache dir.
    pub corrupt: Vec<String>,
}

impl CacheStats {
    pub fn total_entries(&self) -> usize {
        self.completions.values().map(|s| s.entries).sum::<usize>() + self.embeddings.entries
    }
}

fn record_files(dir: &Path, sub: &str) -> std::io::Result<Vec<PathBuf>> {
    let path = dir.join(sub);
    if !path.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

/// Entry counts and byte sizes per stage tag. Corrupt entries are listed
/// and skipped.
pub fn cache_stats(dir: &Path) -> std::io::Result<CacheStats> {
    let mut stats = CacheStats::default();
    for path in record_files(dir, "completions")? {
        let bytes = std::fs::metadata(&path)?.len();
        match read_record::<CompletionRecord>(&path) {
            Some(record) => {
                let entry = stats.completions.entry(record.tag).or_default();
                entry.entries += 1;
                entry.bytes += bytes;
            }
            None => stats.corrupt.push(relative(dir, &path)),
        }
    }
    for path in record_files(dir, "embeddings")? {
        let bytes = std::fs::metadata(&path)?.len();
        match read_record::<EmbeddingRecord>(&path) {
            Some(_) => {
                stats.embeddings.entries += 1;
                stats.embeddings.bytes += bytes;
            }
            None => stats.corrupt.push(relative(dir, &path)),
        }
    }
    Ok(stats)
}

/// Removes completion records carrying `tag` (`"embed"` removes embedding
/// records). Returns the number removed.
pub fn cache_prune(dir: &Path, tag: &str) -> std::io::Result<usize> {
    let mut removed = 0;
    if tag == "embed" {
        for path in record_files(dir, "embeddings")? {
            std::fs::remove_file(path)?;
            removed += 1;
        }
        return Ok(removed);
    }
    for path in record_files(dir, "completions")? {
        if read_record::<CompletionRecord>(&path).is_some_and(|r| r.tag == tag) {
            std::fs::remove_file(path)?;
            removed += 1;
        }
    }
    Ok(removed)
}

fn copy_records(from: &Path, to: &Path) -> std::io::Result<usize> {
    let mut copied = 0;
    for sub in ["completions", "embeddings"] {
        let files = record_files(from, sub)?;
        if files.is_empty() {
            continue;
        }
        std::fs::create_dir_all(to.join(sub))?;
        for path in files {
            let valid = if sub == "completions" {
                read_record::<CompletionRecord>(&path).is_some()
            } else {
                read_record::<EmbeddingRecord>(&path).is_some()
            };
            if !valid {
                continue;
            }
            std::fs::copy(&path, to.join(sub).join(path.file_name().expect("file name")))?;
            copied += 1;
        }
    }
    Ok(copied)
}

/// Copies every valid record into `bundle`, which then works as a replay
/// fixture directory.
pub fn cache_export(dir: &Path, bundle: &Path) -> std::io::Result<usize> {
    std::fs::create_dir_all(bundle)?;
    let copied = copy_records(dir, bundle)?;
    let manifest = serde_json::json!({ "format": "mcs-sql-replay", "version": RECORD_VERSION });
    std::fs::write(bundle.join("fixtures.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(copied)
}

/// Copies every valid record of `bundle` into the cache at `dir`.
pub fn cache_import(bundle: &Path, dir: &Path) -> std::io::Result<usize> {
    copy_records(bundle, dir)
}
