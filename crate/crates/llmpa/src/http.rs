//! Chat-completions client with bounded exponential-backoff retries.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use llmpa_core::backend::{BackendError, BackendRequest, LlmBackend};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Environment variable holding the bearer token.
pub const API_KEY_VAR: &str = "LLMPA_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model_name: String::new(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 500,
        }
    }
}

impl HttpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.endpoint.trim().is_empty() {
            return Err("http backend needs an endpoint".into());
        }
        if self.model_name.trim().is_empty() {
            return Err("http backend needs a model_name".into());
        }
        Ok(())
    }

    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`.
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << (retry - 1).min(16)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallStats {
    pub attempts: u32,
    pub retries: u32,
}

#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpBackend {
    /// Reads the API key from [`API_KEY_VAR`] when set.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        Self::with_api_key(config, std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()))
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::Unsupported)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Unsupported(format!("http client: {e}")))?;
        Ok(Self {
            config,
            api_key,
            client,
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    /// Totals across every call: (calls, attempts, retries).
    pub fn totals(&self) -> (u64, u64, u64) {
        (self.calls.load(Ordering::Relaxed), self.attempts.load(Ordering::Relaxed), self.retries.load(Ordering::Relaxed))
    }

    pub fn body(&self, request: &BackendRequest) -> serde_json::Value {
        json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Failure> {
        let mut req = self.client.post(&self.config.endpoint).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.body(body.to_string()).send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retryable(e.to_string()))?;
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("status {}: {text}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Request { status: status.as_u16(), body: text }));
        }
        extract_content(&text).map_err(Failure::Fatal)
    }

    pub fn complete_with_stats(&self, request: &BackendRequest) -> (Result<String, BackendError>, CallStats) {
        let body = self.body(request);
        let mut stats = CallStats::default();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let result = loop {
            stats.attempts += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.attempt(&body) {
                Ok(content) => break Ok(content),
                Err(Failure::Fatal(e)) => break Err(e),
                Err(Failure::Retryable(message)) => {
                    if stats.retries >= self.config.max_retries {
                        break Err(BackendError::Transport { attempts: stats.attempts, message });
                    }
                    stats.retries += 1;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    log::warn!("backend attempt {} failed ({message}); retrying", stats.attempts);
                    thread::sleep(self.config.backoff(stats.retries));
                }
            }
        };
        (result, stats)
    }
}

/// `choices[0].message.content` of a chat-completions response.
pub fn extract_content(body: &str) -> Result<String, BackendError> {
    #[derive(Deserialize)]
    struct Message {
        content: String,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Message,
    }
    #[derive(Deserialize)]
    struct Response {
        choices: Vec<Choice>,
    }
    let parsed: Response = serde_json::from_str(body).map_err(|e| BackendError::Response(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| BackendError::Response("no choices".into()))
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        self.complete_with_stats(request).0
    }
}
