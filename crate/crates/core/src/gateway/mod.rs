//! Chat-completion gateway shared by every pipeline stage: per-endpoint
//! admission control, retry with backoff, pluggable backends and a cost ledger.

pub mod http;
pub mod ledger;
pub mod mock;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::time::Instant;

use crate::domain::SamplingConfig;
use crate::prompting::ChatTurn;
pub use http::HttpBackend;
pub use ledger::{ledger_report, CostLedger, CostRow, UsageRecord};
pub use mock::{MockBackend, RecordingBackend, ReplayBackend, TranscriptEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Zero disables request spacing.
    #[serde(default)]
    pub requests_per_minute: u32,
    #[serde(default)]
    pub price_per_1k_prompt_tokens: f64,
    #[serde(default)]
    pub price_per_1k_completion_tokens: f64,
}

fn default_in_flight() -> usize {
    8
}

impl EndpointConfig {
    /// Free, unthrottled endpoint for offline runs.
    pub fn mock(name: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            model: name.clone(),
            name,
            base_url: String::new(),
            api_key_env: None,
            max_in_flight: default_in_flight(),
            requests_per_minute: 0,
            price_per_1k_prompt_tokens: 0.0,
            price_per_1k_completion_tokens: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidEndpoint(format!("{}: {m}", self.name)));
        if self.name.is_empty() {
            return bad("name empty".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        for (field, price) in [
            ("price_per_1k_prompt_tokens", self.price_per_1k_prompt_tokens),
            ("price_per_1k_completion_tokens", self.price_per_1k_completion_tokens),
        ] {
            if !(price.is_finite() && price >= 0.0) {
                return bad(format!("{field} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub turns: Vec<ChatTurn>,
    pub sampling: SamplingConfig,
}

impl ChatRequest {
    /// Hex SHA-256 of the canonical JSON of (turns, sampling).
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.turns, &self.sampling)
    }
}

pub fn fingerprint(turns: &[ChatTurn], sampling: &SamplingConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        turns: &'a [ChatTurn],
        sampling: &'a SamplingConfig,
    }
    let bytes = serde_json::to_vec(&Key { turns, sampling }).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    pub usage: Usage,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("unscripted request {0}")]
    Unscripted(String),
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("exhausted_retries: {endpoint} failed {attempts} times, last error: {last}")]
    ExhaustedRetries { endpoint: String, attempts: u32, last: String },
    #[error("auth_error: {endpoint}: {detail}")]
    Auth { endpoint: String, detail: String },
    #[error("malformed_response: {endpoint}: {detail}")]
    MalformedResponse { endpoint: String, detail: String },
    #[error("unscripted_request: {endpoint}: fingerprint {fingerprint}")]
    Unscripted { endpoint: String, fingerprint: String },
    #[error("empty_turns: a chat needs at least one turn")]
    EmptyTurns,
    #[error("invalid_sampling: {0}")]
    InvalidSampling(String),
    #[error("invalid_endpoint: {0}")]
    InvalidEndpoint(String),
}

impl GatewayError {
    pub fn is_auth(&self) -> bool {
        matches!(self, GatewayError::Auth { .. })
    }
}

/// Capped exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: u32,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay_ms: 1000, factor: 2, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep after failed attempt `attempt` (1-based).
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let exp = (self.factor as u64).saturating_pow(attempt.saturating_sub(1));
        Duration::from_millis(self.base_delay_ms.saturating_mul(exp).min(self.max_delay_ms))
    }
}

struct Admission {
    permits: Semaphore,
    next_slot: tokio::sync::Mutex<Instant>,
}

/// Shared entry point for all model calls.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    admission: Mutex<HashMap<String, Arc<Admission>>>,
    ledger: Mutex<CostLedger>,
    jitter: Mutex<ChaCha8Rng>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            admission: Mutex::new(HashMap::new()),
            ledger: Mutex::new(CostLedger::default()),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_jitter_seed(self, seed: u64) -> Self {
        *self.jitter.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().unwrap().clone()
    }

    fn admission(&self, endpoint: &EndpointConfig) -> Arc<Admission> {
        self.admission
            .lock()
            .unwrap()
            .entry(endpoint.name.clone())
            .or_insert_with(|| {
                Arc::new(Admission {
                    permits: Semaphore::new(endpoint.max_in_flight),
                    next_slot: tokio::sync::Mutex::new(Instant::now()),
                })
            })
            .clone()
    }

    /// Requests `sampling.n_samples` completions. Backends that return fewer
    /// choices than asked are queried again for the remainder.
    pub async fn chat(
        &self,
        endpoint: &EndpointConfig,
        turns: &[ChatTurn],
        sampling: &SamplingConfig,
    ) -> Result<Vec<String>, GatewayError> {
        if turns.is_empty() {
            return Err(GatewayError::EmptyTurns);
        }
        endpoint.validate()?;
        sampling.validate().map_err(GatewayError::InvalidSampling)?;
        let wanted = sampling.n_samples as usize;
        let mut out = Vec::with_capacity(wanted);
        while out.len() < wanted {
            let request = ChatRequest {
                turns: turns.to_vec(),
                sampling: sampling.with_n((wanted - out.len()) as u32),
            };
            let mut got = self.call_with_retry(endpoint, &request).await?;
            got.truncate(wanted - out.len());
            out.extend(got);
        }
        Ok(out)
    }

    async fn call_with_retry(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let admission = self.admission(endpoint);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = admission.permits.acquire().await.expect("semaphore never closed");
                if endpoint.requests_per_minute > 0 {
                    let interval = Duration::from_secs(60) / endpoint.requests_per_minute;
                    let slot = {
                        let mut next = admission.next_slot.lock().await;
                        let slot = (*next).max(Instant::now());
                        *next = slot + interval;
                        slot
                    };
                    tokio::time::sleep_until(slot).await;
                }
                self.backend.complete(endpoint, request).await
            };
            let name = endpoint.name.clone();
            match result {
                Ok(response) if response.completions.is_empty() => {
                    return Err(GatewayError::MalformedResponse { endpoint: name, detail: "no completions".into() })
                }
                Ok(response) => {
                    self.ledger.lock().unwrap().record(endpoint, response.usage);
                    return Ok(response.completions);
                }
                Err(BackendError::Transient(last)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::ExhaustedRetries { endpoint: name, attempts: attempt, last });
                    }
                    let ceiling = self.retry.ceiling(attempt).as_millis() as u64;
                    let delay = self.jitter.lock().unwrap().random_range(0..=ceiling);
                    tracing::debug!(endpoint = %name, attempt, delay_ms = delay, "retrying after transient error: {last}");
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                }
                Err(BackendError::Auth(detail)) => return Err(GatewayError::Auth { endpoint: name, detail }),
                Err(BackendError::Rejected(detail) | BackendError::Malformed(detail)) => {
                    return Err(GatewayError::MalformedResponse { endpoint: name, detail })
                }
                Err(BackendError::Unscripted(fingerprint)) => {
                    return Err(GatewayError::Unscripted { endpoint: name, fingerprint })
                }
            }
        }
    }
}
