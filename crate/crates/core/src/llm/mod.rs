//! Chat-completion backends.
//!
//! [`Backend`] wraps a [`Transport`] (an OpenAI-compatible HTTP endpoint or
//! a scripted stub) with retries, bounded parallelism and an optional
//! content-addressed response cache. Usage from every call is turned into
//! priced [`CostRecord`]s by a [`CostLedger`].

mod cache;
mod cost;
mod http;
mod stub;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, CachedResponse, ResponseCache};
pub use cost::{record_cost, CostLedger, CostRecord, CostTotals, ModelPrice, PriceTable};
pub use http::HttpTransport;
pub use stub::{Matcher, StubEntry, StubScript, StubTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Exactly one system message, first; at least one user message; system
/// and user content non-empty.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), String> {
    match messages.first() {
        Some(m) if m.role == Role::System => {}
        _ => return Err("first message must be the system message".into()),
    }
    if messages.iter().filter(|m| m.role == Role::System).count() != 1 {
        return Err("exactly one system message is allowed".into());
    }
    if !messages.iter().any(|m| m.role == Role::User) {
        return Err("at least one user message is required".into());
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::Assistant && m.content.trim().is_empty())
    {
        return Err(format!("empty {} message", m.role));
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend failed after {attempts} attempt(s){}: {message}", status_suffix(*.last_status))]
    Backend {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("stub script has no response for: {0}")]
    ScriptExhausted(String),
    #[error("invalid prompt: {0}")]
    InvalidMessages(String),
    #[error("no price configured for model '{0}'")]
    UnknownModelPrice(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

fn status_suffix(status: Option<u16>) -> String {
    status.map(|s| format!(" (last status {s})")).unwrap_or_default()
}

/// Failure of a single transport attempt.
#[derive(Debug, Clone)]
pub struct TransportError {
    pub status: Option<u16>,
    pub retryable: bool,
    pub message: String,
}

impl TransportError {
    /// Rate limits and server errors are retried; other statuses are not.
    pub fn from_status(status: u16, body: &str) -> Self {
        TransportError {
            status: Some(status),
            retryable: status == 429 || (500..600).contains(&status),
            message: body.chars().take(500).collect(),
        }
    }

    pub fn transport(message: impl Into<String>) -> Self {
        TransportError {
            status: None,
            retryable: true,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        TransportError {
            status: None,
            retryable: false,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One request/response exchange with a model. Implementations must be
/// callable from several threads at once.
pub trait Transport: Send + Sync {
    fn send(&self, messages: &[ChatMessage], cfg: &BackendConfig) -> Result<RawCompletion, StubOrTransport>;

    /// True when responses depend on call order, which forces sequential
    /// use for reproducible runs.
    fn order_dependent(&self) -> bool {
        false
    }
}

/// Transport failures are either retryable wire problems or a missing stub
/// response, which is never retried.
#[derive(Debug, Clone)]
pub enum StubOrTransport {
    Transport(TransportError),
    ScriptExhausted(String),
}

impl From<TransportError> for StubOrTransport {
    fn from(e: TransportError) -> Self {
        StubOrTransport::Transport(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Stub,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "stub" => Ok(BackendKind::Stub),
            other => Err(format!("unknown backend '{other}' (expected http|stub)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1` after `n` failures: base × 2^(n−1).
    pub fn backoff(&self, failures: u32) -> Duration {
        self.base_backoff
            .saturating_mul(1u32 << failures.saturating_sub(1).min(16))
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
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub endpoint: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(with = "millis")]
    pub request_timeout: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Stub,
            endpoint: None,
            model_name: "stub".into(),
            temperature: 0.0,
            max_output_tokens: 512,
            parallelism: 4,
            retry: RetryPolicy::default(),
            api_key_env: "OPENAI_API_KEY".into(),
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!("temperature {} outside [0, 1]", self.temperature)));
        }
        if self.parallelism == 0 {
            return Err(LlmError::Config("parallelism must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(LlmError::Config("retry.max_attempts must be at least 1".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.is_none() {
            return Err(LlmError::Config("http backend needs an endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency: Duration,
    /// Served from the response cache: no tokens billed, no latency added.
    pub cached: bool,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Shareable handle to a configured model backend.
pub struct Backend {
    cfg: BackendConfig,
    transport: Arc<dyn Transport>,
    cache: Option<Arc<ResponseCache>>,
    read_cache: bool,
    limiter: Limiter,
    sleep: fn(Duration),
}

impl Backend {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let parallelism = if transport.order_dependent() { 1 } else { cfg.parallelism };
        Ok(Backend {
            limiter: Limiter::new(parallelism),
            cfg,
            transport,
            cache: None,
            read_cache: true,
            sleep: std::thread::sleep,
        })
    }

    pub fn http(cfg: BackendConfig) -> Result<Self, LlmError> {
        let transport = HttpTransport::from_config(&cfg)?;
        Self::new(cfg, Arc::new(transport))
    }

    pub fn stub(cfg: BackendConfig, script: StubScript) -> Result<Self, LlmError> {
        Self::new(cfg, Arc::new(StubTransport::new(script)))
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Skip cache lookups but still store fresh responses; used for
    /// repeated runs that must each hit the model.
    pub fn bypass_cache_reads(mut self, bypass: bool) -> Self {
        self.read_cache = !bypass;
        self
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn effective_parallelism(&self) -> usize {
        if self.transport.order_dependent() {
            1
        } else {
            self.cfg.parallelism
        }
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, LlmError> {
        validate_messages(messages).map_err(LlmError::InvalidMessages)?;
        let key = cache_key(&self.cfg.model_name, self.cfg.temperature, messages);
        if let (Some(cache), true) = (&self.cache, self.read_cache) {
            if let Some(hit) = cache.get(&key) {
                return Ok(Completion {
                    text: hit.text,
                    usage: Usage {
                        cached: true,
                        ..Usage::default()
                    },
                });
            }
        }

        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut attempts = 0u32;
        let raw = loop {
            attempts += 1;
            match self.transport.send(messages, &self.cfg) {
                Ok(raw) => break raw,
                Err(StubOrTransport::ScriptExhausted(what)) => return Err(LlmError::ScriptExhausted(what)),
                Err(StubOrTransport::Transport(e)) => {
                    if !e.retryable || attempts >= self.cfg.retry.max_attempts {
                        return Err(LlmError::Backend {
                            attempts,
                            last_status: e.status,
                            message: e.message,
                        });
                    }
                    log::warn!(
                        "attempt {attempts} failed ({}); retrying",
                        e.status.map(|s| s.to_string()).unwrap_or(e.message)
                    );
                    (self.sleep)(self.cfg.retry.backoff(attempts));
                }
            }
        };
        let latency = if self.transport.order_dependent() || self.cfg.kind == BackendKind::Stub {
            Duration::ZERO
        } else {
            started.elapsed()
        };

        if let Some(cache) = &self.cache {
            cache.put(
                &key,
                CachedResponse {
                    key: key.clone(),
                    text: raw.text.clone(),
                    prompt_tokens: raw.prompt_tokens,
                    completion_tokens: raw.completion_tokens,
                },
            );
        }
        Ok(Completion {
            text: raw.text,
            usage: Usage {
                prompt_tokens: raw.prompt_tokens,
                completion_tokens: raw.completion_tokens,
                latency,
                cached: false,
                attempts,
            },
        })
    }
}
