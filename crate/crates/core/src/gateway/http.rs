use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EndpointConfig, Usage};

/// Chat-completions client for any server that speaks the common
/// `POST {base_url}/chat/completions` JSON shape.
pub struct HttpBackend {
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transient(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn request_body(model: &str, request: &ChatRequest) -> serde_json::Value {
    let messages: Vec<_> = request
        .turns
        .iter()
        .map(|t| json!({"role": t.role.as_str(), "content": t.content}))
        .collect();
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.sampling.temperature,
        "top_p": request.sampling.top_p,
        "n": request.sampling.n_samples,
        "max_tokens": request.sampling.max_tokens,
    })
}

pub(crate) fn parse_body(body: &str) -> Result<ChatResponse, BackendError> {
    let wire: WireResponse = serde_json::from_str(body).map_err(|e| BackendError::Malformed(format!("response body: {e}")))?;
    if wire.choices.is_empty() {
        return Err(BackendError::Malformed("response has no choices".into()));
    }
    let completions = wire.choices.into_iter().map(|c| c.message.content.unwrap_or_default()).collect();
    let usage = wire
        .usage
        .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
        .unwrap_or_default();
    Ok(ChatResponse { completions, usage })
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&request_body(&endpoint.model, request));
        if let Some(var) = endpoint.api_key_env.as_deref().filter(|v| !v.is_empty()) {
            let key = std::env::var(var).map_err(|_| BackendError::Auth(format!("environment variable {var} is not set")))?;
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| BackendError::Transient(format!("{url}: {e}")))?;
        let status = response.status();
        let body = response.text().await.map_err(|e| BackendError::Transient(format!("{url}: {e}")))?;
        let snippet: String = body.chars().take(300).collect();
        match status.as_u16() {
            200..=299 => parse_body(&body),
            401 | 403 => Err(BackendError::Auth(format!("http {status}: {snippet}"))),
            408 | 409 | 429 | 500..=599 => Err(BackendError::Transient(format!("http {status}: {snippet}"))),
            _ => Err(BackendError::Rejected(format!("http {status}: {snippet}"))),
        }
    }
}
