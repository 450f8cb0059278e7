//! Chat-completion gateway: the only place that talks to LLM providers.
//!
//! Every model call goes through [`Gateway::complete`], which routes by
//! [`LlmRole`], enforces the per-run call budget and hands the request to a
//! [`ChatProvider`]. Providers can be recorded into a [`Transcript`] and
//! replayed from it by request hash, so pipelines run offline in tests.

mod http;
pub mod prompts;
mod replay;

pub use http::{HttpProvider, ProviderConfig};
pub use prompts::{render_prompt, PromptTemplate};
pub use replay::{FnProvider, RecordingProvider, ReplayProvider, Transcript, TranscriptEntry};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("provider timed out after {0} s")]
    Timeout(u64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("call budget of {0} exhausted")]
    BudgetExceeded(usize),
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("prompt template {template} is missing binding {name}")]
    MissingBinding { template: String, name: String },
    #[error("unknown prompt template {0}")]
    UnknownTemplate(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no provider routed for role {0}")]
    Unrouted(LlmRole),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

/// Which part of the engine is calling; each binds to its own route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmRole {
    PersonaGen,
    MemoryGen,
    Rewriter,
    Tutor,
    StudentSim,
    Judge,
}

impl LlmRole {
    pub const ALL: [LlmRole; 6] =
        [LlmRole::PersonaGen, LlmRole::MemoryGen, LlmRole::Rewriter, LlmRole::Tutor, LlmRole::StudentSim, LlmRole::Judge];

    pub fn default_temperature(self) -> f64 {
        match self {
            LlmRole::Tutor | LlmRole::StudentSim => 0.7,
            _ => 0.0,
        }
    }
}

impl fmt::Display for LlmRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

/// Wire-level request, serialized in the chat-completions shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl CompletionRequest {
    /// Stable SHA-256 over the serialized model, temperature and messages.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("request serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => return Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role != ChatRole::System => {
                return Err(GatewayError::InvalidRequest("first message must be the system message".into()))
            }
            _ => {}
        }
        if self.messages.iter().any(|m| m.role != ChatRole::Assistant && m.content.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest("empty system or user message".into()));
        }
        Ok(())
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

#[derive(Clone)]
pub struct Route {
    pub provider: Arc<dyn ChatProvider>,
    pub model: String,
    pub temperature: f64,
}

/// Role-routed access to chat providers with a per-run call cap.
#[derive(Clone)]
pub struct Gateway {
    routes: BTreeMap<LlmRole, Route>,
    calls: Arc<AtomicUsize>,
    budget: Option<usize>,
}

impl Gateway {
    pub fn new() -> Self {
        Self { routes: BTreeMap::new(), calls: Arc::new(AtomicUsize::new(0)), budget: None }
    }

    /// Routes every role to one provider at the role's default temperature.
    pub fn uniform(provider: Arc<dyn ChatProvider>, model: impl Into<String>) -> Self {
        let model = model.into();
        let mut g = Self::new();
        for role in LlmRole::ALL {
            g = g.route(role, provider.clone(), model.clone(), role.default_temperature());
        }
        g
    }

    pub fn route(mut self, role: LlmRole, provider: Arc<dyn ChatProvider>, model: impl Into<String>, temperature: f64) -> Self {
        self.routes.insert(role, Route { provider, model: model.into(), temperature });
        self
    }

    pub fn with_budget(mut self, max_calls: usize) -> Self {
        self.budget = Some(max_calls);
        self
    }

    pub fn is_routed(&self, role: LlmRole) -> bool {
        self.routes.contains_key(&role)
    }

    pub fn calls_made(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn request_for(&self, role: LlmRole, messages: Vec<ChatMessage>) -> Result<CompletionRequest, GatewayError> {
        let route = self.routes.get(&role).ok_or(GatewayError::Unrouted(role))?;
        Ok(CompletionRequest { model: route.model.clone(), temperature: route.temperature, messages })
    }

    pub fn complete(&self, role: LlmRole, messages: Vec<ChatMessage>) -> Result<String, GatewayError> {
        let request = self.request_for(role, messages)?;
        request.validate()?;
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(cap) = self.budget {
            if n >= cap {
                self.calls.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::BudgetExceeded(cap));
            }
        }
        self.routes[&role].provider.complete(&request)
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}
