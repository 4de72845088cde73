use serde::{Deserialize, Serialize};

use super::{BackendConfig, ChatMessage, LlmError, RawCompletion, StubOrTransport, Transport, TransportError};
use crate::corpus::estimate_tokens;

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Client for OpenAI-compatible `/chat/completions` endpoints.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, LlmError> {
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| LlmError::Config("http backend needs an endpoint".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: completions_url(endpoint),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

fn completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

impl Transport for HttpTransport {
    fn send(&self, messages: &[ChatMessage], cfg: &BackendConfig) -> Result<RawCompletion, StubOrTransport> {
        let body = ChatRequest {
            model: &cfg.model_name,
            messages,
            temperature: cfg.temperature,
            max_tokens: cfg.max_output_tokens,
        };
        let mut req = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(serde_json::to_vec(&body).expect("request serializes"));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError::transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::from_status(status, &text).into());
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| TransportError::fatal(format!("malformed completion response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::fatal("completion response has no choices"))?;
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                messages.iter().map(|m| estimate_tokens(&m.content) as u64).sum(),
                estimate_tokens(&content) as u64,
            ),
        };
        Ok(RawCompletion {
            text: content,
            prompt_tokens,
            completion_tokens,
        })
    }
}
