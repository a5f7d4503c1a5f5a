//! A deterministic, rule-based stand-in for a chat model.
//!
//! It reads the JSON payloads the engine sends and answers every structured
//! role with a schema-valid reply derived from word overlap. It exists so
//! scenarios can run offline; it is not meant to be a good model. The curator
//! role is reported unavailable so curation takes the rule-based path.

use std::collections::BTreeSet;

use regex::Regex;
use serde_json::{json, Value};

use super::{ChatReply, ChatRequest, Role, Transport, TransportError};
use crate::recognizer::classify_memory_type;
use crate::text::content_words;

#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineModel;

impl OfflineModel {
    pub fn new() -> Self {
        OfflineModel
    }
}

fn overlap(query: &[String], text: &str) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    let words: BTreeSet<String> = content_words(text).into_iter().collect();
    let hits = query.iter().filter(|w| words.contains(*w)).count();
    hits as f64 / query.len() as f64
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or_default()
}

fn items(v: &Value, key: &str) -> Vec<(String, String)> {
    v.get(key)
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .map(|m| (str_field(m, "id").to_string(), str_field(m, "content").to_string()))
                .collect()
        })
        .unwrap_or_default()
}

fn judge(payload: &Value) -> Value {
    let query = content_words(str_field(payload, "query"));
    let mut cached = items(payload, "facts");
    cached.extend(items(payload, "experiences"));
    let joined = cached.iter().map(|(_, c)| c.as_str()).collect::<Vec<_>>().join(" ");
    let cover = if cached.is_empty() { 0.0 } else { overlap(&query, &joined) };
    let (sufficiency, level, uncertainty) = if cover >= 0.5 {
        ("sufficient", "cluster_summaries", 0.2)
    } else if cover > 0.0 {
        ("partial", "cluster_memory_buffers", 0.6)
    } else {
        ("insufficient", "memory_manager_retrieval", 0.9)
    };
    json!({
        "utility_score": 0.1 + 0.8 * cover,
        "uncertainty_score": uncertainty,
        "sufficiency": sufficiency,
        "retrieval_level": level,
        "explore": sufficiency != "sufficient",
    })
}

fn planner(payload: &Value) -> Value {
    let query = str_field(payload, "query");
    let words = content_words(query);
    let mut nodes = vec![json!({"id": "q0", "text": query, "query_type": "semantic"})];
    let mut edges = vec![];
    if !words.is_empty() {
        nodes.push(json!({"id": "q1", "text": words.join(" "), "query_type": "semantic"}));
        edges.push(json!({"from": "q0", "to": "q1", "relationship": "refines"}));
        if words.len() > 3 {
            nodes.push(json!({"id": "q2", "text": format!("when {}", words.join(" ")), "query_type": "episodic"}));
            edges.push(json!({"from": "q0", "to": "q2", "relationship": "complements"}));
        }
    }
    json!({"nodes": nodes, "edges": edges})
}

fn is_small_talk(text: &str) -> bool {
    content_words(text).len() < 2
}

fn semantic(payload: &Value) -> Value {
    let user = str_field(payload, "user").trim();
    if user.is_empty() || user.ends_with('?') || is_small_talk(user) {
        return json!({"semantic_memories": []});
    }
    let inventory = Regex::new(r"(?i)^\s*(?:please\s+)?(add|remove)\s+(.+?)\s+(?:to|from)\s+(?:my|the)\s+(?:shopping\s+)?list").unwrap();
    let content = match inventory.captures(user) {
        Some(c) => format!("OBJECT_OP: {} {}", c[1].to_uppercase(), &c[2]),
        None => user.to_string(),
    };
    json!({"semantic_memories": [{
        "content": content,
        "memory_type": classify_memory_type(user).as_str(),
    }]})
}

fn clip(text: &str, words: usize) -> String {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() <= words {
        parts.join(" ")
    } else {
        format!("{} ...", parts[..words].join(" "))
    }
}

fn episodic(payload: &Value) -> Value {
    json!({"episode_entry": format!(
        "User said \"{}\"; assistant replied \"{}\".",
        clip(str_field(payload, "user"), 40),
        clip(str_field(payload, "assistant"), 25)
    )})
}

fn transformer(payload: &Value) -> Value {
    let entries: Vec<&str> = payload
        .get("entries")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    json!({"preemptive_text": format!("For future turns, keep in mind: {}", entries.join(" | "))})
}

fn assessor(payload: &Value) -> Value {
    let response: BTreeSet<String> = content_words(str_field(payload, "response")).into_iter().collect();
    let mut used = vec![];
    let mut scores = serde_json::Map::new();
    for (id, content) in items(payload, "memories") {
        let words = content_words(&content);
        let shared = words.iter().filter(|w| response.contains(*w)).count();
        if !words.is_empty() && shared * 2 >= words.len() {
            scores.insert(id.clone(), json!(0.8));
            used.push(id);
        }
    }
    json!({"used_memory_ids": used, "utility_scores": scores, "reward_criteria": ""})
}

/// Answers from the memory line that best overlaps the query.
fn respond(prompt: &str) -> String {
    let query = prompt
        .lines()
        .skip_while(|l| !l.starts_with("## Current query"))
        .nth(1)
        .unwrap_or_default()
        .trim();
    if !query.ends_with('?') {
        return "Understood.".to_string();
    }
    let words = content_words(query);
    let best = prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- ["))
        .filter_map(|l| l.split_once("] ").map(|(_, rest)| rest))
        .map(|l| l.split(" (elapsed_seconds=").next().unwrap_or(l))
        .map(|l| (overlap(&words, l), l))
        .filter(|(score, _)| *score > 0.0)
        .fold(None::<(f64, &str)>, |acc, cand| match acc {
            Some(best) if best.0 >= cand.0 => Some(best),
            _ => Some(cand),
        });
    match best {
        Some((_, line)) => format!("From memory: {line}"),
        None => "I do not have that in memory.".to_string(),
    }
}

impl Transport for OfflineModel {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, TransportError> {
        if request.role == Role::Responder {
            return Ok(ChatReply::text(respond(&request.user)));
        }
        if request.role == Role::Curator {
            return Err(TransportError::Unavailable("offline model has no curator".into()));
        }
        let payload: Value = serde_json::from_str(&request.user).unwrap_or(Value::Null);
        let reply = match request.role {
            Role::Judge => judge(&payload),
            Role::Planner => planner(&payload),
            Role::SemanticExtractor => semantic(&payload),
            Role::EpisodicExtractor => episodic(&payload),
            Role::EpisodeTransformer => transformer(&payload),
            Role::UtilityAssessor => assessor(&payload),
            Role::ProposalGenerator => json!({"topics": []}),
            Role::Curator | Role::Responder => unreachable!(),
        };
        Ok(ChatReply::text(reply.to_string()))
    }
}
