//! Uniform gateway for every model call.
//!
//! A [`Gateway`] wraps a [`Transport`] and adds schema validation with a
//! single repair retry, bounded retries on timeouts, and a token ledger that
//! attributes every call to one role and one turn.

mod http;
mod offline;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TurnIndex;
use crate::text::{count_tokens, strip_code_fence};

pub use http::{HttpEmbedder, HttpTransport, RemoteSettings};
pub use offline::OfflineModel;
pub use scripted::{Script, ScriptRule, ScriptedTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Judge,
    Planner,
    Curator,
    SemanticExtractor,
    EpisodicExtractor,
    EpisodeTransformer,
    UtilityAssessor,
    ProposalGenerator,
    Responder,
}

impl Role {
    pub const ALL: [Role; 9] = [
        Role::Judge,
        Role::Planner,
        Role::Curator,
        Role::SemanticExtractor,
        Role::EpisodicExtractor,
        Role::EpisodeTransformer,
        Role::UtilityAssessor,
        Role::ProposalGenerator,
        Role::Responder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Judge => "judge",
            Role::Planner => "planner",
            Role::Curator => "curator",
            Role::SemanticExtractor => "semantic_extractor",
            Role::EpisodicExtractor => "episodic_extractor",
            Role::EpisodeTransformer => "episode_transformer",
            Role::UtilityAssessor => "utility_assessor",
            Role::ProposalGenerator => "proposal_generator",
            Role::Responder => "responder",
        }
    }

    pub fn parse(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == name)
    }

    /// Everything but the responder answers with a JSON object.
    pub fn is_structured(self) -> bool {
        self != Role::Responder
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub role: Role,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub structured: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    /// Provider-reported usage; estimated from text length when absent.
    pub usage: Option<Usage>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        ChatReply {
            content: content.into(),
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("script exhausted for role {role} at call #{ordinal}")]
    ScriptExhausted { role: Role, ordinal: usize },
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    /// Retriable failure that persisted past the retry budget; callers fall back.
    #[error("{role} gateway unavailable: {message}")]
    Unavailable { role: Role, message: String },
    /// Reply did not match the expected shape, even after the repair retry.
    #[error("{role} reply failed validation: {message}")]
    Schema { role: Role, message: String },
    /// Test-harness bug: never converted into a runtime fallback.
    #[error("script exhausted for role {role} at call #{ordinal}")]
    ScriptExhausted { role: Role, ordinal: usize },
    #[error("embedding provider failed: {0}")]
    Embedding(String),
}

impl GatewayError {
    /// Errors that must propagate instead of triggering a role fallback.
    pub fn is_hard(&self) -> bool {
        matches!(self, GatewayError::ScriptExhausted { .. })
    }
}

/// Decoding settings; one shared default with optional per-role overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingSettings {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub per_role: BTreeMap<Role, (f64, u32)>,
}

impl Default for DecodingSettings {
    fn default() -> Self {
        DecodingSettings {
            temperature: 0.0,
            max_tokens: 1024,
            per_role: BTreeMap::new(),
        }
    }
}

impl DecodingSettings {
    fn for_role(&self, role: Role) -> (f64, u32) {
        self.per_role
            .get(&role)
            .copied()
            .unwrap_or((self.temperature, self.max_tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub turn: TurnIndex,
    pub role: Role,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub entries: Vec<LedgerEntry>,
}

impl TokenLedger {
    pub fn total(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.prompt_tokens + e.completion_tokens)
            .sum()
    }

    pub fn for_turn(&self, turn: TurnIndex) -> Vec<LedgerEntry> {
        self.entries.iter().filter(|e| e.turn == turn).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion<T> {
    pub value: T,
    pub usage: Usage,
    /// Number of transport calls spent, including retries and the repair call.
    pub attempts: u32,
}

const MAX_TIMEOUT_RETRIES: u32 = 2;

pub struct Gateway {
    transport: Arc<dyn Transport>,
    settings: DecodingSettings,
    ledger: Mutex<TokenLedger>,
    turn: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("settings", &self.settings)
            .field("turn", &self.turn.load(Ordering::Relaxed))
            .finish()
    }
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self::with_settings(transport, DecodingSettings::default())
    }

    pub fn with_settings(transport: Arc<dyn Transport>, settings: DecodingSettings) -> Self {
        Gateway {
            transport,
            settings,
            ledger: Mutex::new(TokenLedger::default()),
            turn: AtomicU64::new(0),
        }
    }

    /// Subsequent calls are attributed to `turn` in the ledger.
    pub fn set_turn(&self, turn: TurnIndex) {
        self.turn.store(turn, Ordering::SeqCst);
    }

    pub fn ledger(&self) -> TokenLedger {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    fn record(&self, role: Role, usage: Usage) {
        let turn = self.turn.load(Ordering::SeqCst);
        self.ledger.lock().expect("ledger poisoned").entries.push(LedgerEntry {
            turn,
            role,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        });
    }

    /// One logical call: retries timeouts, then gives up as `Unavailable`.
    fn send(&self, role: Role, system: &str, user: &str) -> Result<(String, Usage, u32), GatewayError> {
        let (temperature, max_tokens) = self.settings.for_role(role);
        let request = ChatRequest {
            role,
            system: system.to_string(),
            user: user.to_string(),
            temperature,
            max_tokens,
            structured: role.is_structured(),
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.transport.send(&request) {
                Ok(reply) => {
                    let usage = reply.usage.unwrap_or_else(|| Usage {
                        prompt_tokens: (count_tokens(system) + count_tokens(user)) as u64,
                        completion_tokens: count_tokens(&reply.content) as u64,
                    });
                    self.record(role, usage);
                    return Ok((reply.content, usage, attempts));
                }
                Err(TransportError::ScriptExhausted { role, ordinal }) => {
                    return Err(GatewayError::ScriptExhausted { role, ordinal })
                }
                Err(TransportError::Timeout(msg)) if attempts <= MAX_TIMEOUT_RETRIES => {
                    tracing::debug!(%role, attempts, "retrying after timeout: {msg}");
                }
                Err(TransportError::Timeout(message)) | Err(TransportError::Unavailable(message)) => {
                    return Err(GatewayError::Unavailable { role, message })
                }
            }
        }
    }

    /// Structured call: parse into `T`, validate, and repair once on failure.
    pub fn complete<T, V>(&self, role: Role, system: &str, user: &str, validate: V) -> Result<Completion<T>, GatewayError>
    where
        T: DeserializeOwned,
        V: Fn(&T) -> Result<(), String>,
    {
        let parse = |raw: &str| -> Result<T, String> {
            let value: T = serde_json::from_str(strip_code_fence(raw)).map_err(|e| e.to_string())?;
            validate(&value)?;
            Ok(value)
        };
        let (raw, mut usage, mut attempts) = self.send(role, system, user)?;
        let problem = match parse(&raw) {
            Ok(value) => return Ok(Completion { value, usage, attempts }),
            Err(problem) => problem,
        };
        tracing::debug!(%role, "repairing invalid reply: {problem}");
        let repair = format!(
            "{user}\n\nYour previous reply was rejected: {problem}\nReply again with a single JSON object that satisfies the schema."
        );
        let (raw, more, n) = self.send(role, system, &repair)?;
        usage.prompt_tokens += more.prompt_tokens;
        usage.completion_tokens += more.completion_tokens;
        attempts += n;
        parse(&raw)
            .map(|value| Completion { value, usage, attempts })
            .map_err(|message| GatewayError::Schema { role, message })
    }

    /// Free-text call (response generation).
    pub fn complete_text(&self, role: Role, system: &str, user: &str) -> Result<Completion<String>, GatewayError> {
        let (value, usage, attempts) = self.send(role, system, user)?;
        Ok(Completion { value, usage, attempts })
    }
}
