use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EndpointConfig, Usage};

type Responder = dyn Fn(&EndpointConfig, &ChatRequest) -> Option<Vec<String>> + Send + Sync;

/// Offline backend. Replies come from, in order: the fingerprint script, the
/// responder closure, the default reply. With none of them matching the
/// request fails as unscripted.
///
/// Reply lists shorter than `n_samples` are cycled. Usage is counted in
/// whitespace-separated words.
#[derive(Clone, Default)]
pub struct MockBackend {
    script: HashMap<String, Vec<String>>,
    responder: Option<Arc<Responder>>,
    default_reply: Option<String>,
    latency: Option<Duration>,
    transient_failures: Arc<AtomicUsize>,
    live: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    calls: Arc<AtomicUsize>,
}

impl MockBackend {
    /// Strict mock: unscripted requests are errors.
    pub fn new(script: HashMap<String, Vec<String>>) -> Self {
        Self { script, ..Self::default() }
    }

    pub fn script(mut self, fingerprint: impl Into<String>, replies: Vec<String>) -> Self {
        self.script.insert(fingerprint.into(), replies);
        self
    }

    pub fn with_responder(
        mut self,
        f: impl Fn(&EndpointConfig, &ChatRequest) -> Option<Vec<String>> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Arc::new(f));
        self
    }

    /// Non-strict mode: serve this reply to anything unscripted.
    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = Some(reply.into());
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// The next `n` calls fail with a transient error.
    pub fn failing_first(self, n: usize) -> Self {
        self.transient_failures.store(n, Ordering::SeqCst);
        self
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn replies_for(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Option<Vec<String>> {
        if let Some(r) = self.script.get(&request.fingerprint()) {
            return Some(r.clone());
        }
        if let Some(r) = self.responder.as_ref().and_then(|f| f(endpoint, request)) {
            return Some(r);
        }
        self.default_reply.clone().map(|r| vec![r])
    }
}

pub(crate) fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn complete(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.live);
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            tokio::time::sleep(latency).await;
        }
        let failed = self
            .transient_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failed {
            return Err(BackendError::Transient("mock transient failure".into()));
        }
        let replies = self
            .replies_for(endpoint, request)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| BackendError::Unscripted(request.fingerprint()))?;
        let n = request.sampling.n_samples as usize;
        let completions: Vec<String> = replies.iter().cycle().take(n).cloned().collect();
        let usage = Usage {
            prompt_tokens: request.turns.iter().map(|t| word_count(&t.content)).sum(),
            completion_tokens: completions.iter().map(|c| word_count(c)).sum(),
        };
        Ok(ChatResponse { completions, usage })
    }
}

/// One served request, as stored in a replay transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub endpoint: String,
    pub fingerprint: String,
    pub request: ChatRequest,
    pub completions: Vec<String>,
    pub usage: Usage,
}

/// Wraps another backend and keeps every successful exchange.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    log: Mutex<Vec<TranscriptEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Writes the transcript as JSONL, sorted by fingerprint so that the file
    /// does not depend on completion order.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut entries = self.entries();
        entries.sort_by(|a, b| (&a.endpoint, &a.fingerprint).cmp(&(&b.endpoint, &b.fingerprint)));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

#[async_trait]
impl ChatBackend for RecordingBackend {
    async fn complete(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(endpoint, request).await?;
        self.log.lock().unwrap().push(TranscriptEntry {
            endpoint: endpoint.name.clone(),
            fingerprint: request.fingerprint(),
            request: request.clone(),
            completions: response.completions.clone(),
            usage: response.usage,
        });
        Ok(response)
    }
}

/// Serves a recorded transcript. Repeated requests with the same fingerprint
/// get the recorded responses in order, then the last one again.
pub struct ReplayBackend {
    entries: HashMap<String, Vec<TranscriptEntry>>,
    cursor: Mutex<HashMap<String, usize>>,
}

impl ReplayBackend {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        let mut map: HashMap<String, Vec<TranscriptEntry>> = HashMap::new();
        for e in entries {
            map.entry(e.fingerprint.clone()).or_default().push(e);
        }
        Self { entries: map, cursor: Mutex::new(HashMap::new()) }
    }

    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }
}

#[async_trait]
impl ChatBackend for ReplayBackend {
    async fn complete(&self, _endpoint: &EndpointConfig, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let fp = request.fingerprint();
        let recorded = self.entries.get(&fp).ok_or_else(|| BackendError::Unscripted(fp.clone()))?;
        let i = {
            let mut cursor = self.cursor.lock().unwrap();
            let c = cursor.entry(fp).or_insert(0);
            let i = (*c).min(recorded.len() - 1);
            *c += 1;
            i
        };
        let e = &recorded[i];
        Ok(ChatResponse { completions: e.completions.clone(), usage: e.usage })
    }
}
