use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatProvider, CompletionRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_hash: String,
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub response: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }
}

/// Serves recorded responses by request hash. Unknown requests are an error,
/// never a fabricated reply. Repeated identical requests are answered in
/// recorded order; once exhausted the last response repeats.
pub struct ReplayProvider {
    responses: HashMap<String, Vec<String>>,
    cursor: Mutex<HashMap<String, usize>>,
}

impl ReplayProvider {
    pub fn new(transcript: &Transcript) -> Self {
        let mut responses: HashMap<String, Vec<String>> = HashMap::new();
        for e in &transcript.entries {
            responses.entry(e.request_hash.clone()).or_default().push(e.response.clone());
        }
        Self { responses, cursor: Mutex::new(HashMap::new()) }
    }
}

impl ChatProvider for ReplayProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let hash = request.hash();
        let stored = self.responses.get(&hash).ok_or_else(|| GatewayError::ReplayMiss(hash.clone()))?;
        let mut cursor = self.cursor.lock().expect("replay cursor poisoned");
        let i = cursor.entry(hash).or_insert(0);
        let response = stored[(*i).min(stored.len() - 1)].clone();
        *i += 1;
        Ok(response)
    }
}

/// Wraps a provider and appends one transcript entry per successful call.
pub struct RecordingProvider {
    inner: Arc<dyn ChatProvider>,
    transcript: Arc<Mutex<Transcript>>,
    timed: bool,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn ChatProvider>) -> Self {
        Self { inner, transcript: Arc::new(Mutex::new(Transcript::default())), timed: true }
    }

    /// Records latency as 0 so transcripts are byte-reproducible.
    pub fn untimed(inner: Arc<dyn ChatProvider>) -> Self {
        Self { timed: false, ..Self::new(inner) }
    }

    /// Appends to an existing transcript, so several routes can share one.
    pub fn sharing(inner: Arc<dyn ChatProvider>, transcript: Arc<Mutex<Transcript>>, timed: bool) -> Self {
        Self { inner, transcript, timed }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript poisoned").clone()
    }

    pub fn handle(&self) -> Arc<Mutex<Transcript>> {
        self.transcript.clone()
    }
}

impl ChatProvider for RecordingProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let start = Instant::now();
        let response = self.inner.complete(request)?;
        let latency_ms = if self.timed { start.elapsed().as_millis() as u64 } else { 0 };
        self.transcript.lock().expect("transcript poisoned").entries.push(TranscriptEntry {
            request_hash: request.hash(),
            model: request.model.clone(),
            temperature: request.temperature,
            messages: request.messages.clone(),
            response: response.clone(),
            latency_ms,
        });
        Ok(response)
    }
}

/// Provider backed by a closure; used for scripted offline models.
pub struct FnProvider<F> {
    f: F,
}

impl<F> FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (self.f)(request)
    }
}
