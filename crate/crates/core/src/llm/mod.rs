//! Chat-completion and embedding access for the pipeline agents.
//!
//! Every agent talks to the model through its own [`ChatSession`]; sessions
//! never share history. The backend behind the [`Gateway`] is either a remote
//! chat-completion server or the deterministic [`ScriptedBackend`] used by
//! tests and scenario packs.

mod prompts;
mod remote;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompts::system_prompt;
pub use remote::RemoteBackend;
pub use scripted::{
    hash_embed, ScriptedBackend, ScriptedCall, ScriptedEntry, ScriptedTranscript,
    HASH_EMBEDDING_DIM,
};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("system prompt must not be empty")]
    EmptyPrompt,
    #[error("chat message must not be empty")]
    EmptyMessage,
    #[error("text to embed must not be empty")]
    EmptyText,
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("scripted transcript has no entry for role {role} matching message: {excerpt}")]
    ScriptedExhausted { role: AgentRole, excerpt: String },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

/// The six model-backed roles in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Summarizer,
    StrategyAnalyzer,
    Generator,
    CommandExtractor,
    ResultsVerifier,
    ReportGenerator,
}

impl AgentRole {
    pub const ALL: [AgentRole; 6] = [
        AgentRole::Summarizer,
        AgentRole::StrategyAnalyzer,
        AgentRole::Generator,
        AgentRole::CommandExtractor,
        AgentRole::ResultsVerifier,
        AgentRole::ReportGenerator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Summarizer => "summarizer",
            AgentRole::StrategyAnalyzer => "strategy_analyzer",
            AgentRole::Generator => "generator",
            AgentRole::CommandExtractor => "command_extractor",
            AgentRole::ResultsVerifier => "results_verifier",
            AgentRole::ReportGenerator => "report_generator",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

/// One isolated conversation with the model.
#[derive(Debug, Clone)]
pub struct ChatSession {
    role: AgentRole,
    session_id: String,
    model_id: String,
    history: Vec<Message>,
}

impl ChatSession {
    pub fn role(&self) -> AgentRole {
        self.role
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn history(&self) -> &[Message] {
        &self.history
    }
}

/// A dense embedding produced by one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; zero when either vector has zero norm or the
    /// dimensions differ.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.values.len() != other.values.len() {
            return 0.0;
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }

    /// `1 - cosine`, in `[0, 2]`.
    pub fn cosine_distance(&self, other: &EmbeddingVector) -> f64 {
        (1.0 - self.cosine(other)).clamp(0.0, 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_id: String,
    pub embedding_model_id: String,
    pub temperature: f64,
    pub max_retries: u32,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_id: "scripted".to_string(),
            embedding_model_id: "hash-256".to_string(),
            temperature: 0.0,
            max_retries: 2,
            request_timeout: Duration::from_secs(120),
            api_key_env: "PENTRAIL_API_KEY".to_string(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.kind == BackendKind::Remote && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(LlmError::Config("remote backend requires an endpoint".into()));
        }
        Ok(())
    }
}

pub(crate) mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !(secs >= 0.0) || !secs.is_finite() {
            return Err(serde::de::Error::custom("duration must be a non-negative number of seconds"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

/// What the gateway needs from a model provider.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, role: AgentRole, messages: &[Message]) -> Result<String, LlmError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError>;
    fn model_id(&self) -> &str;
}

/// Shareable entry point for all model traffic in a run.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    next_session: Arc<AtomicU64>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("model_id", &self.backend.model_id())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            next_session: Arc::new(AtomicU64::new(1)),
        }
    }

    pub fn scripted(transcript: ScriptedTranscript) -> (Self, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new(transcript));
        (Self::new(backend.clone()), backend)
    }

    pub fn from_config(
        config: &BackendConfig,
        transcript: Option<ScriptedTranscript>,
    ) -> Result<Self, LlmError> {
        config.validate()?;
        match config.kind {
            BackendKind::Scripted => {
                let transcript = transcript.ok_or_else(|| {
                    LlmError::Config("scripted backend requires a transcript".into())
                })?;
                Ok(Self::scripted(transcript).0)
            }
            BackendKind::Remote => Ok(Self::new(Arc::new(RemoteBackend::from_config(config)?))),
        }
    }

    pub fn open_session(
        &self,
        role: AgentRole,
        system_prompt: &str,
    ) -> Result<ChatSession, LlmError> {
        if system_prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        Ok(ChatSession {
            role,
            session_id: format!("{}-{n}", role.as_str()),
            model_id: self.backend.model_id().to_string(),
            history: vec![Message {
                speaker: Speaker::System,
                text: system_prompt.to_string(),
            }],
        })
    }

    /// Opens a session with the role's standard system prompt.
    pub fn open_role_session(&self, role: AgentRole) -> ChatSession {
        self.open_session(role, system_prompt(role))
            .expect("built-in system prompts are non-empty")
    }

    /// Sends `message` and records the exchange. History is left untouched
    /// when the backend fails.
    pub fn chat(&self, session: &mut ChatSession, message: &str) -> Result<String, LlmError> {
        if message.trim().is_empty() {
            return Err(LlmError::EmptyMessage);
        }
        let mut messages = session.history.clone();
        messages.push(Message {
            speaker: Speaker::User,
            text: message.to_string(),
        });
        let reply = self.backend.complete(session.role, &messages)?;
        session.history.push(Message {
            speaker: Speaker::User,
            text: message.to_string(),
        });
        session.history.push(Message {
            speaker: Speaker::Assistant,
            text: reply.clone(),
        });
        Ok(reply)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::EmptyText);
        }
        self.backend.embed(text).map(EmbeddingVector::new)
    }
}
