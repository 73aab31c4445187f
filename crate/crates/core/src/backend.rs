//! Vision-LLM backends: an HTTP chat-completion client and a deterministic
//! in-process mock, plus the retry and concurrency wrappers the pipeline
//! puts around them.

use crate::promptgen::{BundleKind, PromptBundle};
use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::sync::Semaphore;

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingKey(String),
    #[error("mock failure ({0})")]
    Mock(String),
    #[error("image encoding failed: {0}")]
    Encode(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for Arc<B> {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        (**self).complete(bundle).await
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthStyle {
    /// `Authorization: Bearer <key>`
    #[default]
    Bearer,
    /// `api-key: <key>` (Azure deployments)
    ApiKeyHeader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the key. The key itself is
    /// never read from files or flags.
    pub api_key_env: String,
    pub auth: AuthStyle,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "ADSCRIBE_API_KEY".into(),
            auth: AuthStyle::Bearer,
            temperature: 0.0,
            max_tokens: 300,
            timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Answers with the first N words of a canned sentence, N taken from the
    /// prompt's word-count clause.
    #[default]
    EchoWords,
    /// Always answers with `MockConfig::fixed_text`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub mode: MockMode,
    pub fixed_text: String,
    /// The first `fail_first` calls fail, whatever the prompt.
    pub fail_first: usize,
    /// Every call for these clips fails.
    pub fail_clips: Vec<String>,
    /// Artificial latency per call, to make concurrency observable.
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http(HttpBackendConfig),
    Mock(MockConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Mock(MockConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

// ---------------------------------------------------------------------------
// Retry and concurrency bound

/// Calls the backend, retrying failures with exponential backoff. Gives up
/// after `1 + max_retries` attempts and returns the last error.
pub async fn complete_with_retry(backend: &dyn Backend, bundle: &PromptBundle, retry: &RetryPolicy) -> Result<String, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.complete(bundle).await {
            Ok(text) => return Ok(text),
            Err(e) if attempt >= retry.max_retries => return Err(e),
            Err(e) => {
                tracing::warn!(clip = %bundle.metadata.clip_id, attempt, error = %e, "backend call failed, retrying");
                tokio::time::sleep(retry.delay(attempt)).await;
                attempt += 1;
            }
        }
    }
}

/// Limits the number of in-flight calls to the wrapped backend.
pub struct Bounded<B> {
    inner: B,
    permits: Semaphore,
}

impl<B> Bounded<B> {
    pub fn new(inner: B, max_in_flight: usize) -> Self {
        Self { inner, permits: Semaphore::new(max_in_flight.max(1)) }
    }
}

#[async_trait]
impl<B: Backend> Backend for Bounded<B> {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.inner.complete(bundle).await
    }
}

// ---------------------------------------------------------------------------
// Mock

const CANNED: &str = "Amy walks slowly across the dim kitchen toward the window and glances back at \
    Nick who stands frozen by the door holding a crumpled letter while rain streaks the glass and a \
    kettle begins to whistle on the stove behind them as the evening light fades into blue shadows \
    over the quiet suburban street outside";

const CANNED_CAPTION: &str = "A person stands in a dim room near a window with rain on the glass";

/// Extracts N from the first "exactly N words" in `text`.
pub fn requested_words(text: &str) -> Option<usize> {
    let idx = text.find("exactly ")?;
    let rest = &text[idx + "exactly ".len()..];
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let n: usize = digits.parse().ok()?;
    rest[digits.len()..].starts_with(" words").then_some(n)
}

#[derive(Debug, Clone)]
pub struct MockCall {
    pub clip_id: String,
    pub kind: BundleKind,
    pub user_text: String,
    pub frames: Vec<crate::frame::FrameBuffer>,
    pub succeeded: bool,
}

/// Deterministic offline backend that records every request it receives.
#[derive(Debug, Default)]
pub struct MockBackend {
    config: MockConfig,
    calls: Mutex<Vec<MockCall>>,
    attempts: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self { config, ..Default::default() }
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().expect("poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn answer(&self, bundle: &PromptBundle) -> String {
        match self.config.mode {
            MockMode::Fixed => self.config.fixed_text.clone(),
            MockMode::EchoWords => {
                let source = if bundle.metadata.kind == BundleKind::FrameCaption { CANNED_CAPTION } else { CANNED };
                let words: Vec<&str> = source.split_whitespace().collect();
                let n = requested_words(&bundle.user_text).unwrap_or(words.len());
                words.iter().cycle().take(n).copied().collect::<Vec<_>>().join(" ")
            }
        }
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let n = self.attempts.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.config.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.config.delay_ms)).await;
        }
        let result = if n < self.config.fail_first {
            Err(BackendError::Mock(format!("scripted failure {} of {}", n + 1, self.config.fail_first)))
        } else if self.config.fail_clips.contains(&bundle.metadata.clip_id) {
            Err(BackendError::Mock(format!("clip {} always fails", bundle.metadata.clip_id)))
        } else {
            Ok(self.answer(bundle))
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.calls.lock().expect("poisoned").push(MockCall {
            clip_id: bundle.metadata.clip_id.clone(),
            kind: bundle.metadata.kind,
            user_text: bundle.user_text.clone(),
            frames: bundle.frames.clone(),
            succeeded: result.is_ok(),
        });
        result
    }
}

// ---------------------------------------------------------------------------
// HTTP

/// OpenAI-style chat-completion client. Text and frames go in one user
/// message as interleaved parts; frames are PNG data URLs.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: String,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn from_env(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| BackendError::MissingKey(config.api_key_env.clone()))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: HttpBackendConfig, api_key: String) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, api_key, client })
    }

    /// The JSON request body sent for `bundle`.
    pub fn request_body(&self, bundle: &PromptBundle) -> Result<serde_json::Value, BackendError> {
        let mut parts = vec![serde_json::json!({ "type": "text", "text": bundle.user_text })];
        for frame in &bundle.frames {
            let png = frame.encode_png().map_err(|e| BackendError::Encode(e.to_string()))?;
            let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png));
            parts.push(serde_json::json!({ "type": "image_url", "image_url": { "url": url } }));
        }
        Ok(serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [
                { "role": "system", "content": bundle.system_text },
                { "role": "user", "content": parts },
            ],
        }))
    }
}

/// Pulls the assistant text out of a chat-completion response.
pub fn parse_completion(body: &serde_json::Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed("no choices[0].message.content".into()))?;
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::Malformed(format!("unexpected content {other}"))),
    }
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let body = self.request_body(bundle)?;
        let req = self.client.post(&self.config.endpoint).json(&body);
        let req = match self.config.auth {
            AuthStyle::Bearer => req.bearer_auth(&self.api_key),
            AuthStyle::ApiKeyHeader => req.header("api-key", &self.api_key),
        };
        let resp = req.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: text });
        }
        let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        parse_completion(&json)
    }
}

/// Instantiates the configured backend. The mock is returned separately so
/// callers (tests, the CLI summary) can inspect its call log.
pub fn build_backend(config: &BackendConfig) -> Result<(Arc<dyn Backend>, Option<Arc<MockBackend>>), BackendError> {
    match config {
        BackendConfig::Http(http) => Ok((Arc::new(HttpBackend::from_env(http.clone())?), None)),
        BackendConfig::Mock(mock) => {
            let m = Arc::new(MockBackend::new(mock.clone()));
            Ok((m.clone(), Some(m)))
        }
    }
}
