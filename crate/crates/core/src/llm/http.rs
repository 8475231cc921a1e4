use std::time::Duration;

use serde_json::{json, Value};

use super::{GatewayError, LlmBackend, LlmRequest};

/// Attempts and backoff for transient failures (429, 5xx, transport).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// OpenAI-compatible `/chat/completions` and `/embeddings` client.
pub struct HttpBackend {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Failure {
    Transient(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: impl Into<String>, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent,
            retry,
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            match self.post_once(&url, body) {
                Ok(value) => return Ok(value),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    tracing::warn!(%url, attempt, "transient failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: self.retry.attempts.max(1),
            message: last,
        })
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if !self.api_key.is_empty() {
            request = request.header("Authorization", &format!("Bearer {}", self.api_key));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(GatewayError::Protocol(format!("invalid JSON body: {e}")))),
            401 | 403 => Err(Failure::Fatal(GatewayError::Auth(text))),
            429 | 500..=599 => Err(Failure::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(Failure::Fatal(GatewayError::Http { status, body: text })),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &LlmRequest, model: &str) -> Result<Vec<String>, GatewayError> {
        let body = json!({
            "model": model,
            "messages": [{"role": "user", "content": request.prompt}],
            "n": request.n,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let value = self.post("chat/completions", &body)?;
        let choices = value
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("response lacks `choices`".into()))?;
        let mut indexed: Vec<(u64, String)> = choices
            .iter()
            .enumerate()
            .map(|(pos, choice)| {
                let index = choice.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
                let content = choice
                    .pointer("/message/content")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string();
                (index, content)
            })
            .collect();
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, c)| c).collect())
    }

    fn embed(&self, texts: &[String], model: &str) -> Result<Vec<Vec<f32>>, GatewayError> {
        let body = json!({ "model": model, "input": texts });
        let value = self.post("embeddings", &body)?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("response lacks `data`".into()))?;
        let mut indexed = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let vector: Vec<f32> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Protocol("embedding item lacks `embedding`".into()))?
                .iter()
                .map(|v| v.as_f64().map(|f| f as f32))
                .collect::<Option<_>>()
                .ok_or_else(|| GatewayError::Protocol("non-numeric embedding component".into()))?;
            indexed.push((index, vector));
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}
