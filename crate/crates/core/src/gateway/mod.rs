//! A uniform client for chat/vision completion backends.
//!
//! Requests go out in the OpenAI-style chat-completions shape. The gateway
//! adds a sliding-window rate limit, an in-flight window, and retries with
//! geometric backoff on transport errors, 429 and 5xx. Other 4xx responses
//! fail immediately.

mod http;
mod limiter;
mod mock;
pub mod prompts;
mod tasks;

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpBackend;
pub use limiter::{Clock, RateLimiter, SystemClock, VirtualClock};
pub use mock::{MockBackend, ScriptEntry};
pub use tasks::{extract_visual, split_sentences_bounded, verify_visual, TaskConfig};

use crate::parallel::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContentPart {
    Text(String),
    /// A local path or URL; the HTTP backend inlines local files.
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl Message {
    pub fn user_text(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: vec![ContentPart::Text(text.into())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("response has no text content: {0}")]
    MissingContent(String),
    #[error("no usable yes/no verdict after {attempts} attempts (last reply `{last}`)")]
    Undecided { attempts: u32, last: String },
    #[error("reply does not match `<species> | <caption>` after {attempts} attempts (last reply `{last}`)")]
    FormatMismatch { attempts: u32, last: String },
    #[error("reply names `{got}` instead of `{expected}`")]
    SpeciesMismatch { expected: String, got: String },
    #[error("extracted caption is empty")]
    EmptyCaption,
    #[error("configuration: {0}")]
    Config(String),
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.messages.is_empty() {
            return bad("at least one message is required");
        }
        if self.model.trim().is_empty() {
            return bad("model name is empty");
        }
        for m in &self.messages {
            if m.role != Role::User && m.content.iter().any(|p| matches!(p, ContentPart::Image(_))) {
                return bad("image parts are only allowed in user messages");
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    /// The chat-completions JSON body, with image references left as given.
    pub fn wire_body(&self) -> serde_json::Value {
        self.wire_body_with(|r| r.to_string())
    }

    pub(crate) fn wire_body_with(&self, image_url: impl Fn(&str) -> String) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = self
            .messages
            .iter()
            .map(|m| {
                let content = match m.content.as_slice() {
                    [ContentPart::Text(t)] => serde_json::Value::String(t.clone()),
                    parts => serde_json::Value::Array(
                        parts
                            .iter()
                            .map(|p| match p {
                                ContentPart::Text(t) => serde_json::json!({"type": "text", "text": t}),
                                ContentPart::Image(r) => {
                                    serde_json::json!({"type": "image_url", "image_url": {"url": image_url(r)}})
                                }
                            })
                            .collect(),
                    ),
                };
                serde_json::json!({"role": m.role, "content": content})
            })
            .collect();
        serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        })
    }

    /// SHA-256 of the wire body, hex encoded. Keys mock replies.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.wire_body().to_string().as_bytes()))
    }

    /// All text parts and image references, newline-joined.
    pub fn flat_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            for p in &m.content {
                match p {
                    ContentPart::Text(t) | ContentPart::Image(t) => {
                        out.push_str(t);
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_backoff: Duration,
    /// Relative jitter in [0, 1): each delay is scaled by 1 ± jitter.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff: Duration::from_millis(500),
            jitter: 0.1,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base * 2^(retry-1),
    /// scaled by a jitter factor derived from `seed`.
    pub fn backoff(&self, retry: u32, seed: u64) -> Duration {
        let base = self.base_backoff.as_secs_f64() * 2f64.powi(retry.saturating_sub(1) as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(retry));
        let u: f64 = rng.random_range(-1.0..=1.0);
        Duration::from_secs_f64((base * (1.0 + self.jitter * u)).max(0.0))
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub max_concurrency: usize,
    pub requests_per_minute: usize,
    pub retry: RetryPolicy,
    #[serde(with = "millis")]
    pub timeout: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1/chat/completions".to_string(),
            api_key_env: "TAXOCAP_API_KEY".to_string(),
            max_concurrency: 8,
            requests_per_minute: 600,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.max_concurrency == 0 || self.requests_per_minute == 0 {
            return Err(GatewayError::Config(
                "max_concurrency and requests_per_minute must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.retry.jitter) {
            return Err(GatewayError::Config("retry.jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Raw HTTP-level reply from a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub status: u16,
    pub body: String,
}

impl BackendReply {
    /// A 200 reply carrying `text` as the first choice.
    pub fn ok_text(text: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
            })
            .to_string(),
        }
    }
}

/// Something that can carry a chat request to a model.
pub trait ChatBackend: Send + Sync {
    /// `Err` means the transport failed before any HTTP status was seen.
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, String>;
}

/// Text of the first choice in a chat-completions response.
pub fn first_choice_text(body: &str) -> Result<String, GatewayError> {
    let json: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::MissingContent(format!("unparseable body: {e}")))?;
    let content = &json["choices"][0]["message"]["content"];
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => {
            let text: String = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                .collect();
            if text.is_empty() {
                Err(GatewayError::MissingContent("content array without text".into()))
            } else {
                Ok(text)
            }
        }
        _ => Err(GatewayError::MissingContent("choices[0].message.content absent".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// HTTP attempts made, including the successful one.
    pub attempts: u32,
}

/// Model names per role. Verification and extraction may use different
/// models; each defaults to `default`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelRoles {
    pub default: String,
    pub verify: Option<String>,
    pub extract: Option<String>,
    pub caption: Option<String>,
}

impl ModelRoles {
    pub fn single(model: impl Into<String>) -> Self {
        Self {
            default: model.into(),
            ..Default::default()
        }
    }
    pub fn verify(&self) -> &str {
        self.verify.as_deref().unwrap_or(&self.default)
    }
    pub fn extract(&self) -> &str {
        self.extract.as_deref().unwrap_or(&self.default)
    }
    pub fn caption(&self) -> &str {
        self.caption.as_deref().unwrap_or(&self.default)
    }
}

/// Shareable across threads; the limiter and in-flight window are the only
/// synchronized state.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    config: BackendConfig,
    models: ModelRoles,
    limiter: RateLimiter,
    window: Semaphore,
    clock: Arc<dyn Clock>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: BackendConfig, models: ModelRoles) -> Result<Self, GatewayError> {
        Self::with_clock(backend, config, models, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(
        backend: Arc<dyn ChatBackend>,
        config: BackendConfig,
        models: ModelRoles,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            backend,
            limiter: RateLimiter::per_minute(config.requests_per_minute),
            window: Semaphore::new(config.max_concurrency),
            config,
            models,
            clock,
        })
    }

    pub fn models(&self) -> &ModelRoles {
        &self.models
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Sends `request` and returns the first choice's text.
    pub fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let seed = u64::from_le_bytes(
            Sha256::digest(request.wire_body().to_string().as_bytes())[..8]
                .try_into()
                .expect("8 bytes"),
        );
        let max = self.config.retry.max_attempts;
        let mut last = String::new();
        for attempt in 1..=max {
            if attempt > 1 {
                self.clock.sleep(self.config.retry.backoff(attempt - 1, seed));
            }
            self.limiter.acquire(self.clock.as_ref());
            let reply = {
                let _permit = self.window.acquire();
                self.backend.send(request)
            };
            match reply {
                Ok(BackendReply { status: 200..=299, body }) => {
                    let text = first_choice_text(&body)?;
                    if attempt > 1 {
                        tracing::debug!(attempt, "request succeeded after retry");
                    }
                    return Ok(Completion { text, attempts: attempt });
                }
                Ok(BackendReply { status: status @ (401 | 403), .. }) => return Err(GatewayError::Auth { status }),
                Ok(BackendReply { status, body }) if status == 429 || status >= 500 => {
                    tracing::warn!(status, attempt, "retryable HTTP status");
                    last = format!("HTTP {status}: {}", truncate(&body, 200));
                }
                Ok(BackendReply { status, body }) => {
                    return Err(GatewayError::Http {
                        status,
                        body: truncate(&body, 500),
                    })
                }
                Err(e) => {
                    tracing::warn!(error = %e, attempt, "transport error");
                    last = e;
                }
            }
        }
        Err(GatewayError::Exhausted { attempts: max, last })
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}
