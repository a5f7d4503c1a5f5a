//! Scripted multi-turn scenarios with probes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::distractors::Distractors;
use crate::error::{Error, Result};
use crate::executor::{Clock, ManualClock, Session, TurnReport};
use crate::gateway::{ChatReply, ChatRequest, Gateway, OfflineModel, Role, Script, ScriptedTransport, Transport, TransportError};
use crate::model::{EngineConfig, Level, MemoryType};
use crate::store::{Embedder, Store};
use crate::text::count_tokens;

const BUILTINS: &[(&str, &str)] = &[
    ("restaurant", include_str!("../../scenarios/restaurant.toml")),
    ("sally_anne", include_str!("../../scenarios/sally_anne.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedMemory {
    pub content: String,
    #[serde(default)]
    pub memory_type: Option<MemoryType>,
    #[serde(default)]
    pub attribute: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    /// Every string must appear in the response.
    #[serde(default)]
    pub rubric_contains: Vec<String>,
    #[serde(default)]
    pub rubric_regex: Option<String>,
    /// Every string must appear in the responder prompt.
    #[serde(default)]
    pub prompt_contains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub text: String,
    /// Insert `span_tokens` worth of distractor turns before this step.
    #[serde(default)]
    pub distractors_before: bool,
    /// Responder reply for this step only.
    #[serde(default)]
    pub reply: Option<String>,
    /// Semantic extraction result for this step only.
    #[serde(default)]
    pub memories: Option<Vec<ScriptedMemory>>,
    #[serde(default)]
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleScript {
    pub role: String,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default)]
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Roles without a script are answered by the offline model.
    #[serde(default)]
    pub offline_model: bool,
    #[serde(default)]
    pub span_tokens: usize,
    #[serde(default)]
    pub config: Option<EngineConfig>,
    #[serde(default, rename = "script")]
    pub scripts: Vec<RoleScript>,
    #[serde(rename = "step")]
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTINS.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Option<Result<Self>> {
        BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, text)| Scenario::parse(text))
    }

    /// A builtin name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(s) = Scenario::builtin(spec) {
            return s;
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
        Scenario::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(format!("{}: {m}", self.name)));
        if self.steps.is_empty() {
            return bad("no steps".into());
        }
        for s in &self.scripts {
            if Role::parse(&s.role).is_none() {
                return bad(format!("unknown role {:?}", s.role));
            }
            if s.contains.is_some() != s.reply.is_some() {
                return bad("`contains` and `reply` go together".into());
            }
        }
        for step in &self.steps {
            if let Some(re) = step.probe.as_ref().and_then(|p| p.rubric_regex.as_ref()) {
                if let Err(e) = Regex::new(re) {
                    return bad(format!("bad rubric regex: {e}"));
                }
            }
        }
        if let Some(c) = &self.config {
            c.validate()?;
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        self.config.clone().unwrap_or_default()
    }

    fn role_scripts(&self) -> BTreeMap<Role, Script> {
        let mut out: BTreeMap<Role, Script> = BTreeMap::new();
        for s in &self.scripts {
            let role = Role::parse(&s.role).expect("validated");
            let mut script = out.remove(&role).unwrap_or_default();
            if let (Some(c), Some(r)) = (&s.contains, &s.reply) {
                script = script.rule(c.clone(), r.clone());
            }
            script.replies.extend(s.replies.iter().cloned());
            if s.fallback.is_some() {
                script.fallback = s.fallback.clone();
            }
            out.insert(role, script);
        }
        out
    }
}

/// Serves the current step's scripted replies once each, delegating the rest.
struct StepOverrides {
    pending: Mutex<BTreeMap<Role, String>>,
    inner: Arc<dyn Transport>,
}

impl Transport for StepOverrides {
    fn send(&self, request: &ChatRequest) -> std::result::Result<ChatReply, TransportError> {
        let taken = self.pending.lock().expect("overrides poisoned").remove(&request.role);
        match taken {
            Some(reply) => Ok(ChatReply::text(reply)),
            None => self.inner.send(request),
        }
    }
}

/// Everything a run needs besides the scenario and configuration.
pub struct RunEnv {
    pub store: Store,
    pub embedder: Arc<dyn Embedder>,
    /// Used for roles the scenario does not script; the offline model when
    /// `None` and the scenario asks for it.
    pub transport: Option<Arc<dyn Transport>>,
    pub clock: Box<dyn Clock>,
}

impl RunEnv {
    pub fn in_memory(embedder: Arc<dyn Embedder>) -> Self {
        RunEnv {
            store: Store::in_memory(embedder.dimension()),
            embedder,
            transport: None,
            clock: Box::new(ManualClock::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub turn_index: u64,
    pub query: String,
    pub response: String,
    pub rubric_passed: bool,
    pub prompt_passed: bool,
    pub missing_from_prompt: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkAudit {
    pub link_count: usize,
    pub symmetric: bool,
}

/// Count L2-L3 links and check that every link is recorded on both ends.
pub fn audit_links(store: &Store) -> LinkAudit {
    let mut count = 0;
    let mut symmetric = true;
    for r in store.records() {
        for partner in r.payload.links() {
            count += 1;
            let back = store.get(partner).is_some_and(|p| p.level != r.level && p.payload.links().contains(&r.memory_id));
            symmetric &= back;
        }
    }
    LinkAudit {
        link_count: count / 2,
        symmetric,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub solved: usize,
    pub probes: usize,
    pub queries: usize,
    pub total_tokens: u64,
    pub tokens_per_query: f64,
    pub retrieval_rounds: u64,
    pub evictions: usize,
    pub distractor_turns: usize,
    pub distractor_tokens: usize,
    pub l2_records: usize,
    pub l3_records: usize,
    pub links: LinkAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub config: EngineConfig,
    pub turns: Vec<TurnReport>,
    pub probes: Vec<ProbeResult>,
    pub summary: ScenarioSummary,
}

impl ScenarioReport {
    pub fn all_probes_passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }
}

fn grade(probe: &Probe, query: &str, report: &TurnReport, prompt: &str) -> ProbeResult {
    let mut rubric = probe.rubric_contains.iter().all(|s| report.response.contains(s.as_str()));
    if let Some(re) = &probe.rubric_regex {
        rubric &= Regex::new(re).expect("validated").is_match(&report.response);
    }
    let missing: Vec<String> = probe
        .prompt_contains
        .iter()
        .filter(|s| !prompt.contains(s.as_str()))
        .cloned()
        .collect();
    ProbeResult {
        turn_index: report.turn_index,
        query: query.to_string(),
        response: report.response.clone(),
        rubric_passed: rubric,
        prompt_passed: missing.is_empty(),
        missing_from_prompt: missing,
        passed: rubric && probe.prompt_contains.iter().all(|s| prompt.contains(s.as_str())),
    }
}

/// Run `scenario` to completion. Returns the report and the finished session.
pub fn run_scenario(scenario: &Scenario, config: &EngineConfig, env: RunEnv) -> Result<(ScenarioReport, Session)> {
    let base: Option<Arc<dyn Transport>> = match env.transport {
        Some(t) => Some(t),
        None if scenario.offline_model => Some(Arc::new(OfflineModel)),
        None => None,
    };
    let mut scripted = ScriptedTransport::from_scripts(scenario.role_scripts());
    if let Some(base) = base {
        scripted = scripted.with_delegate(base);
    }
    let overrides = Arc::new(StepOverrides {
        pending: Mutex::new(BTreeMap::new()),
        inner: Arc::new(scripted),
    });
    let gateway = Gateway::new(overrides.clone());
    let mut session = Session::new(config.clone(), env.store, gateway, env.embedder, env.clock)?;

    let mut distractors = Distractors::new();
    let mut turns = Vec::new();
    let mut probes = Vec::new();
    let (mut distractor_turns, mut distractor_tokens) = (0, 0);
    for step in &scenario.steps {
        if step.distractors_before {
            for q in distractors.span(scenario.span_tokens) {
                turns.push(session.step(q)?);
                distractor_turns += 1;
                distractor_tokens += count_tokens(q);
            }
        }
        {
            let mut pending = overrides.pending.lock().expect("overrides poisoned");
            pending.clear();
            if let Some(reply) = &step.reply {
                pending.insert(Role::Responder, reply.clone());
            }
            if let Some(memories) = &step.memories {
                let items: Vec<_> = memories
                    .iter()
                    .map(|m| json!({"content": m.content, "memory_type": m.memory_type, "attribute": m.attribute}))
                    .collect();
                pending.insert(Role::SemanticExtractor, json!({"semantic_memories": items}).to_string());
            }
        }
        let report = session.step(&step.text)?;
        overrides.pending.lock().expect("overrides poisoned").clear();
        if let Some(probe) = &step.probe {
            probes.push(grade(probe, &step.text, &report, session.last_prompt().unwrap_or_default()));
        }
        turns.push(report);
    }

    let total_tokens = session.gateway().ledger().total();
    let summary = ScenarioSummary {
        solved: probes.iter().filter(|p| p.passed).count(),
        probes: probes.len(),
        queries: turns.len(),
        total_tokens,
        tokens_per_query: total_tokens as f64 / turns.len().max(1) as f64,
        retrieval_rounds: turns.iter().map(|t| t.read_iterations_used as u64).sum(),
        evictions: turns.iter().map(|t| t.evicted_count).sum(),
        distractor_turns,
        distractor_tokens,
        l2_records: session.store().count_level(Level::L2),
        l3_records: session.store().count_level(Level::L3),
        links: audit_links(session.store()),
    };
    let report = ScenarioReport {
        scenario: scenario.name.clone(),
        config: config.clone(),
        turns,
        probes,
        summary,
    };
    Ok((report, session))
}

/// Ids of every record evicted from the buffer at some point during a run.
pub fn evicted_ids(report: &ScenarioReport) -> BTreeSet<crate::model::MemoryId> {
    report.turns.iter().flat_map(|t| t.evicted_ids.iter().cloned()).collect()
}
