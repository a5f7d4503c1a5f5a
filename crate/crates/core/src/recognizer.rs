//! Write-path analysis of a finished exchange.
//!
//! Four independent gateway calls: semantic extraction, episodic
//! accumulation, credit assignment and topic proposals. Every role degrades
//! to an empty or raw result on soft failure; only script exhaustion
//! propagates.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::decay::clamp_score;
use crate::gateway::{Gateway, GatewayError, Role};
use crate::model::{Cluster, ClusterId, MemoryId, MemoryType, TurnIndex, WorkingMemory};
use crate::prompts::system_prompt;

static RULE_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(when(ever)?\s+i\s+(say|mention|write|ask)|if\s+i\s+(say|mention|write|ask)|from\s+now\s+on|always\s+(respond|reply|answer|say|use)|never\s+(respond|reply|say|use)|respond\s+with|reply\s+with|remind\s+me|in\s+future\s+turns|act\s+as|you\s+are\s+(a|an|my)\s)",
    )
    .expect("static regex")
});

static PREFERENCE_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(i\s+(really\s+)?(like|love|enjoy|prefer|hate|dislike|adore)|i\s+can't\s+stand|my\s+favou?rite)\b")
        .expect("static regex")
});

static OBJECT_OP_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*object[_ ]op\s*:?\s*(add|remove)\b\s*").expect("static regex"));

/// Rule for conditional triggers and standing instructions, preference for
/// likes and dislikes, fact otherwise.
pub fn classify_memory_type(text: &str) -> MemoryType {
    if RULE_PATTERN.is_match(text) {
        MemoryType::Rule
    } else if PREFERENCE_PATTERN.is_match(text) {
        MemoryType::Preference
    } else {
        MemoryType::Fact
    }
}

/// Canonical `OBJECT_OP: ADD ...` / `OBJECT_OP: REMOVE ...` spelling.
pub fn normalize_object_op(content: &str) -> String {
    match OBJECT_OP_PATTERN.captures(content) {
        Some(c) => {
            let rest = &content[c.get(0).map_or(0, |m| m.end())..];
            format!("OBJECT_OP: {} {}", c[1].to_uppercase(), rest.trim())
        }
        None => content.trim().to_string(),
    }
}

fn soft<T>(result: Result<T, GatewayError>, fallback: T) -> Result<T, GatewayError> {
    match result {
        Ok(v) => Ok(v),
        Err(e) if e.is_hard() => Err(e),
        Err(e) => {
            tracing::warn!("recognizer degraded: {e}");
            Ok(fallback)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCandidate {
    pub content: String,
    pub memory_type: MemoryType,
    pub tags: Vec<String>,
    pub attribute: Option<String>,
}

#[derive(Deserialize)]
struct RawSemantic {
    content: String,
    #[serde(default)]
    memory_type: Option<MemoryType>,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    attribute: Option<String>,
}

#[derive(Deserialize)]
struct SemanticReply {
    semantic_memories: Vec<RawSemantic>,
}

pub fn extract_semantic(user: &str, assistant: &str, gateway: &Gateway) -> Result<Vec<SemanticCandidate>, GatewayError> {
    let payload = json!({"user": user, "assistant": assistant}).to_string();
    let reply = gateway.complete::<SemanticReply, _>(
        Role::SemanticExtractor,
        system_prompt(Role::SemanticExtractor),
        &payload,
        |_| Ok(()),
    );
    let raw = soft(reply.map(|c| c.value.semantic_memories), Vec::new())?;
    Ok(raw
        .into_iter()
        .filter(|m| !m.content.trim().is_empty())
        .map(|m| {
            let content = normalize_object_op(&m.content);
            SemanticCandidate {
                memory_type: m.memory_type.unwrap_or_else(|| classify_memory_type(&content)),
                content,
                tags: m.tags,
                attribute: m.attribute.filter(|a| !a.trim().is_empty()),
            }
        })
        .collect())
}

/// A finished episode, not yet persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDraft {
    pub preemptive_text: String,
    pub raw_span: (TurnIndex, TurnIndex),
    pub raw_fallback: bool,
}

/// Per-session buffer of turn-pair contributions awaiting an episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAccumulator {
    /// `(step, contribution, raw exchange text)`
    entries: Vec<(TurnIndex, String, String)>,
}

impl EpisodeAccumulator {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Deserialize)]
struct EntryReply {
    episode_entry: String,
}

#[derive(Deserialize)]
struct TransformReply {
    preemptive_text: String,
}

fn non_empty<T>(field: impl Fn(&T) -> &str) -> impl Fn(&T) -> Result<(), String> {
    move |v| {
        if field(v).trim().is_empty() {
            Err("text must not be empty".into())
        } else {
            Ok(())
        }
    }
}

/// Add one exchange; returns a draft once `ep` exchanges have accumulated.
pub fn accumulate_episode(
    acc: &mut EpisodeAccumulator,
    step: TurnIndex,
    user: &str,
    assistant: &str,
    ep: usize,
    gateway: &Gateway,
) -> Result<Option<EpisodeDraft>, GatewayError> {
    assert!(ep >= 1, "episode length must be >= 1");
    let raw = format!("User: {user}\nAssistant: {assistant}");
    let payload = json!({"user": user, "assistant": assistant, "turn": step}).to_string();
    let entry = gateway.complete::<EntryReply, _>(
        Role::EpisodicExtractor,
        system_prompt(Role::EpisodicExtractor),
        &payload,
        non_empty(|r: &EntryReply| &r.episode_entry),
    );
    let entry = soft(entry.map(|c| c.value.episode_entry), raw.clone())?;
    acc.entries.push((step, entry, raw));
    if acc.entries.len() < ep {
        return Ok(None);
    }
    let entries = std::mem::take(&mut acc.entries);
    let span = (entries[0].0, entries[entries.len() - 1].0);
    let payload = json!({
        "entries": entries.iter().map(|e| &e.1).collect::<Vec<_>>(),
        "span": [span.0, span.1],
    })
    .to_string();
    let transformed = gateway.complete::<TransformReply, _>(
        Role::EpisodeTransformer,
        system_prompt(Role::EpisodeTransformer),
        &payload,
        non_empty(|r: &TransformReply| &r.preemptive_text),
    );
    let (preemptive_text, raw_fallback) = match soft(transformed.map(|c| Some(c.value.preemptive_text)), None)? {
        Some(text) => (text, false),
        None => (entries.iter().map(|e| e.2.as_str()).collect::<Vec<_>>().join("\n"), true),
    };
    Ok(Some(EpisodeDraft {
        preemptive_text,
        raw_span: span,
        raw_fallback,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Credit {
    /// Credited ids, in snapshot order.
    pub used_memory_ids: Vec<MemoryId>,
    pub utility_scores: BTreeMap<MemoryId, f64>,
    /// Kept as opaque metadata.
    pub reward_criteria: String,
    /// Ids the assessor named that were not in the snapshot.
    pub rejected: Vec<MemoryId>,
}

#[derive(Deserialize)]
struct CreditReply {
    used_memory_ids: Vec<MemoryId>,
    #[serde(default)]
    utility_scores: BTreeMap<MemoryId, f64>,
    #[serde(default)]
    reward_criteria: String,
}

/// Credit the memories the response relied on. `snapshot` is the buffer the
/// response was generated from; credit outside it is dropped.
pub fn assign_credit(
    query: &str,
    response: &str,
    snapshot: &[(MemoryId, String)],
    gateway: &Gateway,
) -> Result<Credit, GatewayError> {
    if snapshot.is_empty() {
        return Ok(Credit::default());
    }
    let payload = json!({
        "query": query,
        "response": response,
        "memories": snapshot.iter().map(|(id, content)| json!({"id": id, "content": content})).collect::<Vec<_>>(),
    })
    .to_string();
    let reply = gateway.complete::<CreditReply, _>(
        Role::UtilityAssessor,
        system_prompt(Role::UtilityAssessor),
        &payload,
        |r| {
            if r.utility_scores.values().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err("utility scores must be finite".into())
            }
        },
    );
    let Some(reply) = soft(reply.map(|c| Some(c.value)), None)? else {
        return Ok(Credit::default());
    };
    let named: BTreeSet<MemoryId> = reply.used_memory_ids.into_iter().collect();
    let allowed: BTreeSet<&MemoryId> = snapshot.iter().map(|(id, _)| id).collect();
    let rejected: Vec<MemoryId> = named.iter().filter(|id| !allowed.contains(id)).cloned().collect();
    for id in &rejected {
        tracing::warn!(%id, "assessor credited a memory outside the buffer snapshot");
    }
    let used: Vec<MemoryId> = snapshot
        .iter()
        .map(|(id, _)| id)
        .filter(|id| named.contains(*id))
        .cloned()
        .collect();
    let utility_scores = used
        .iter()
        .filter_map(|id| reply.utility_scores.get(id).map(|s| (id.clone(), clamp_score(*s))))
        .collect();
    Ok(Credit {
        used_memory_ids: used,
        utility_scores,
        reward_criteria: reply.reward_criteria,
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicProposal {
    pub name: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub procedural_memory_update: Vec<String>,
}

#[derive(Deserialize)]
struct ProposalReply {
    topics: Vec<TopicProposal>,
}

pub fn propose_topics(
    user: &str,
    assistant: &str,
    clusters: &BTreeMap<ClusterId, Cluster>,
    dynamic_topics: bool,
    gateway: &Gateway,
) -> Result<Vec<TopicProposal>, GatewayError> {
    let payload = json!({
        "user": user,
        "assistant": assistant,
        "existing_topics": clusters.values().map(|c| json!({"name": c.name, "summary": c.summary})).collect::<Vec<_>>(),
        "dynamic_topics": dynamic_topics,
    })
    .to_string();
    let reply = gateway.complete::<ProposalReply, _>(
        Role::ProposalGenerator,
        system_prompt(Role::ProposalGenerator),
        &payload,
        |_| Ok(()),
    );
    let topics = soft(reply.map(|c| c.value.topics), Vec::new())?;
    Ok(topics.into_iter().filter(|t| !t.name.trim().is_empty()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicOutcome {
    pub created: Vec<ClusterId>,
    pub updated: Vec<ClusterId>,
    pub rejected: Vec<String>,
}

fn next_cluster_seq(clusters: &BTreeMap<ClusterId, Cluster>) -> u64 {
    clusters
        .keys()
        .filter_map(|id| id.as_str().strip_prefix('c').and_then(|s| s.parse::<u64>().ok()))
        .max()
        .unwrap_or(0)
        + 1
}

/// Merge proposals into the resident clusters. Names match case-insensitively;
/// new clusters are only created when `dynamic_topics` is set.
pub fn apply_topic_proposals(
    wm: &mut WorkingMemory,
    proposals: &[TopicProposal],
    dynamic_topics: bool,
    turn: TurnIndex,
) -> TopicOutcome {
    let mut outcome = TopicOutcome::default();
    for p in proposals {
        let name = p.name.trim();
        let existing = wm
            .clusters
            .values()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .map(|c| c.cluster_id.clone());
        let id = match existing {
            Some(id) => id,
            None if dynamic_topics => {
                let id = ClusterId::from_seq(next_cluster_seq(&wm.clusters));
                wm.clusters
                    .insert(id.clone(), Cluster::new(id.clone(), name, p.summary.trim(), turn));
                outcome.created.push(id.clone());
                id
            }
            None => {
                outcome.rejected.push(name.to_string());
                continue;
            }
        };
        let cluster = wm.clusters.get_mut(&id).expect("cluster just resolved");
        let mut changed = false;
        if !p.summary.trim().is_empty() && cluster.summary != p.summary.trim() {
            cluster.summary = p.summary.trim().to_string();
            changed = true;
        }
        for instruction in &p.procedural_memory_update {
            let instruction = instruction.trim();
            if !instruction.is_empty() && !cluster.procedural.iter().any(|p| p == instruction) {
                cluster.procedural.push(instruction.to_string());
                changed = true;
            }
        }
        if changed && !outcome.created.contains(&id) && !outcome.updated.contains(&id) {
            outcome.updated.push(id);
        }
    }
    outcome
}
