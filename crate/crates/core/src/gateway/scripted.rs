use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ChatReply, ChatRequest, Role, Transport, TransportError};

/// Reply that simulates a transport timeout.
pub const TIMEOUT_MARKER: &str = "!timeout";
/// Reply that simulates an unreachable provider.
pub const UNAVAILABLE_MARKER: &str = "!unavailable";

/// Reply `reply` whenever the user payload contains `contains`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    pub contains: String,
    pub reply: String,
}

/// Canned replies for one role.
///
/// Resolution order for each call: the first matching rule, then the next
/// unused entry of `replies`, then `fallback`, then the transport's delegate.
/// A call that none of these cover is a script-exhausted error.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub fallback: Option<String>,
}

impl Script {
    pub fn replies<I: IntoIterator<Item = String>>(replies: I) -> Self {
        Script {
            replies: replies.into_iter().collect(),
            ..Script::default()
        }
    }

    pub fn constant(reply: impl Into<String>) -> Self {
        Script {
            fallback: Some(reply.into()),
            ..Script::default()
        }
    }

    pub fn rule(mut self, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            contains: contains.into(),
            reply: reply.into(),
        });
        self
    }
}

#[derive(Debug, Default)]
struct Cursor {
    calls: usize,
    sequential: usize,
}

/// Deterministic transport keyed by (role, call ordinal).
#[derive(Default)]
pub struct ScriptedTransport {
    scripts: BTreeMap<Role, Script>,
    cursors: Mutex<BTreeMap<Role, Cursor>>,
    delegate: Option<Arc<dyn Transport>>,
}

impl std::fmt::Debug for ScriptedTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedTransport")
            .field("scripts", &self.scripts)
            .field("delegate", &self.delegate.is_some())
            .finish()
    }
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scripts(scripts: BTreeMap<Role, Script>) -> Self {
        ScriptedTransport {
            scripts,
            ..Self::default()
        }
    }

    pub fn set_script(&mut self, role: Role, script: Script) {
        self.scripts.insert(role, script);
    }

    /// Calls no script covers are forwarded to `delegate`.
    pub fn with_delegate(mut self, delegate: Arc<dyn Transport>) -> Self {
        self.delegate = Some(delegate);
        self
    }

    pub fn calls(&self, role: Role) -> usize {
        self.cursors
            .lock()
            .expect("cursor poisoned")
            .get(&role)
            .map_or(0, |c| c.calls)
    }
}

fn interpret(reply: &str) -> Result<ChatReply, TransportError> {
    match reply {
        TIMEOUT_MARKER => Err(TransportError::Timeout("scripted timeout".into())),
        UNAVAILABLE_MARKER => Err(TransportError::Unavailable("scripted outage".into())),
        other => Ok(ChatReply::text(other)),
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, TransportError> {
        let role = request.role;
        let chosen = {
            let mut cursors = self.cursors.lock().expect("cursor poisoned");
            let cursor = cursors.entry(role).or_default();
            cursor.calls += 1;
            let ordinal = cursor.calls;
            match self.scripts.get(&role) {
                Some(script) => {
                    if let Some(rule) = script.rules.iter().find(|r| request.user.contains(&r.contains)) {
                        Some(rule.reply.clone())
                    } else if let Some(reply) = script.replies.get(cursor.sequential) {
                        cursor.sequential += 1;
                        Some(reply.clone())
                    } else {
                        script.fallback.clone()
                    }
                }
                None => None,
            }
            .ok_or(ordinal)
        };
        match chosen {
            Ok(reply) => interpret(&reply),
            Err(ordinal) => match &self.delegate {
                Some(delegate) => delegate.send(request),
                None => Err(TransportError::ScriptExhausted { role, ordinal }),
            },
        }
    }
}
