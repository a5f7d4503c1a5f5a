//! Per-turn orchestration: ingest, gated read loop, prompt assembly,
//! response, recognition and the single commit.
//!
//! A turn runs on a copy of the session state; the copy replaces the live
//! state only after the store commit succeeds, so a failed turn leaves the
//! session untouched.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::activator::{apply_plan, curate, expand_query, retrieve, UncertainCluster};
use crate::decay::DecayParams;
use crate::decayer::{assess_round, rank_clusters, GateDecision};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, LedgerEntry, Role};
use crate::manager::{apply_reinforcement, persist, WriteSet};
use crate::model::{
    new_session, ClusterId, EngineConfig, MemoryId, MemoryRecord, MemoryType, Speaker, Timestamp, Turn, TurnIndex,
    WorkingMemory,
};
use crate::prompts::system_prompt;
use crate::recognizer::{
    accumulate_episode, apply_topic_proposals, assign_credit, extract_semantic, propose_topics, EpisodeAccumulator,
};
use crate::store::{Embedder, Store};
use crate::text::count_tokens;

pub trait Clock: Send {
    fn now(&mut self) -> Timestamp;
}

/// Deterministic clock: `start`, then `increment` seconds per reading.
#[derive(Debug, Clone)]
pub struct ManualClock {
    start: Timestamp,
    increment: f64,
    readings: u64,
}

impl ManualClock {
    pub fn new(start: Timestamp, increment: f64) -> Self {
        ManualClock {
            start,
            increment,
            readings: 0,
        }
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        ManualClock::new(0.0, 30.0)
    }
}

impl Clock for ManualClock {
    fn now(&mut self) -> Timestamp {
        let t = self.start + self.increment * self.readings as f64;
        self.readings += 1;
        t
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&mut self) -> Timestamp {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}

/// Points inside a turn at which observers may inspect the working memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Ingest,
    Assess(u32),
    Curate(u32),
    Respond,
    Recognize,
    Commit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub wm: WorkingMemory,
    pub accumulator: EpisodeAccumulator,
    /// Facts written since the last episode closed; the next episode links them.
    pub episode_facts: Vec<MemoryId>,
    /// Completed interaction steps; also the decay clock.
    pub step: TurnIndex,
    pub next_message: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionEntry {
    pub id: String,
    pub retention: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn_index: TurnIndex,
    pub message_index: u64,
    pub query: String,
    pub response: String,
    pub read_iterations_used: u32,
    pub gate_decisions: Vec<GateDecision>,
    pub retrieved_count: usize,
    pub added_count: usize,
    pub added_ids: Vec<MemoryId>,
    pub evicted_count: usize,
    pub evicted_ids: Vec<MemoryId>,
    pub credited_ids: Vec<MemoryId>,
    pub committed_ids: Vec<MemoryId>,
    pub semantic_ids: Vec<MemoryId>,
    pub episode_id: Option<MemoryId>,
    pub token_accounting: Vec<LedgerEntry>,
    pub turn_tokens: u64,
    pub prompt_tokens: usize,
    pub retention_snapshot: Vec<RetentionEntry>,
    pub buffer_size: usize,
    pub history_size: usize,
    pub planner_degraded: bool,
    pub curation_fallback: bool,
}

pub struct Session {
    config: EngineConfig,
    state: SessionState,
    store: Store,
    gateway: Gateway,
    embedder: Arc<dyn Embedder>,
    clock: Box<dyn Clock>,
    last_prompt: Option<String>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("step", &self.state.step)
            .field("store_len", &self.store.len())
            .finish()
    }
}

impl Session {
    pub fn new(
        config: EngineConfig,
        store: Store,
        gateway: Gateway,
        embedder: Arc<dyn Embedder>,
        clock: Box<dyn Clock>,
    ) -> Result<Self> {
        if embedder.dimension() != store.dimension() {
            return Err(Error::Config(format!(
                "embedder dimension {} does not match store dimension {}",
                embedder.dimension(),
                store.dimension()
            )));
        }
        let wm = new_session(&config)?;
        Ok(Session {
            config,
            state: SessionState {
                wm,
                ..SessionState::default()
            },
            store,
            gateway,
            embedder,
            clock,
            last_prompt: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn working_memory(&self) -> &WorkingMemory {
        &self.state.wm
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// The responder prompt of the most recent turn.
    pub fn last_prompt(&self) -> Option<&str> {
        self.last_prompt.as_deref()
    }

    pub fn close(self) -> Store {
        self.store
    }

    pub fn step(&mut self, query: &str) -> Result<TurnReport> {
        self.step_observed(query, |_, _| {})
    }

    pub fn step_observed(&mut self, query: &str, mut observe: impl FnMut(Phase, &WorkingMemory)) -> Result<TurnReport> {
        let config = &self.config;
        let gw = &self.gateway;
        let embedder = self.embedder.as_ref();
        let mut state = self.state.clone();
        let step = state.step + 1;
        gw.set_turn(step);

        let message_index = state.next_message;
        let asked_at = self.clock.now();
        state.wm.push_turn(
            Turn {
                turn_index: message_index,
                role: Speaker::User,
                text: query.to_string(),
                timestamp: asked_at,
            },
            config.window,
        );
        state.next_message += 1;
        observe(Phase::Ingest, &state.wm);

        let mut decisions = Vec::new();
        let mut rounds_used = 0;
        let mut retrieved: BTreeSet<MemoryId> = BTreeSet::new();
        let (mut added_ids, mut evicted_ids) = (Vec::new(), Vec::new());
        let (mut planner_degraded, mut curation_fallback) = (false, false);
        for round in 1..=config.max_read_iterations {
            state.wm.round = round;
            let assessment = assess_round(query, round, &state.wm, &self.store, gw, embedder, config)?;
            decisions.push(assessment.decision);
            observe(Phase::Assess(round), &state.wm);
            if !assessment.decision.triggered {
                break;
            }
            rounds_used = round;
            let uncertain: Vec<UncertainCluster> = assessment
                .assessments
                .iter()
                .filter(|a| a.uncertainty_score >= config.judge_threshold)
                .map(|a| {
                    let cluster = a.cluster_id.as_ref().and_then(|id| state.wm.clusters.get(id));
                    UncertainCluster {
                        name: cluster.map_or("buffer".into(), |c| c.name.clone()),
                        summary: cluster.map_or(String::new(), |c| c.summary.clone()),
                        uncertainty: a.uncertainty_score,
                    }
                })
                .collect();
            let dag = expand_query(query, &uncertain, gw)?;
            planner_degraded |= dag.degraded;
            let candidates = retrieve(
                &dag,
                &self.store,
                embedder,
                config.k_per_query,
                config.linking_active(),
                config.enabled_levels,
            )?;
            retrieved.extend(candidates.iter().map(|c| c.memory_id.clone()));
            let plan = curate(query, &state.wm, &candidates, &self.store, step, config, Some(gw))?;
            curation_fallback |= plan.rule_based;
            added_ids.extend(plan.added.iter().cloned());
            evicted_ids.extend(plan.evicted.iter().cloned());
            apply_plan(&mut state.wm, &plan, &self.store, step);
            observe(Phase::Curate(round), &state.wm);
        }

        let prompt = assemble_prompt(&state.wm, &self.store, config, query, asked_at, step)?;
        let response = gw.complete_text(Role::Responder, system_prompt(Role::Responder), &prompt)?.value;
        let answered_at = self.clock.now();
        state.wm.push_turn(
            Turn {
                turn_index: state.next_message,
                role: Speaker::Assistant,
                text: response.clone(),
                timestamp: answered_at,
            },
            config.window,
        );
        state.next_message += 1;
        observe(Phase::Respond, &state.wm);

        let snapshot: Vec<(MemoryId, String)> = state
            .wm
            .buffer_items
            .iter()
            .filter_map(|b| self.store.get(&b.memory_id).map(|r| (b.memory_id.clone(), r.payload.text().to_string())))
            .collect();
        let credit = assign_credit(query, &response, &snapshot, gw)?;
        let levels = config.enabled_levels;
        let semantic = if levels.l2 { extract_semantic(query, &response, gw)? } else { Vec::new() };
        let episode = if levels.l3 {
            accumulate_episode(&mut state.accumulator, step, query, &response, config.episode_length, gw)?
        } else {
            None
        };
        if levels.l1 {
            let proposals = propose_topics(query, &response, &state.wm.clusters, config.dynamic_topics, gw)?;
            apply_topic_proposals(&mut state.wm, &proposals, config.dynamic_topics, step);
        }
        observe(Phase::Recognize, &state.wm);

        let mut writes = WriteSet::new();
        apply_reinforcement(&mut state.wm, &self.store, &mut writes, &credit.used_memory_ids, config, step);
        let persisted = persist(
            &state.wm,
            &mut self.store,
            &mut writes,
            embedder,
            config,
            step,
            asked_at,
            &semantic,
            episode.as_ref(),
            &mut state.episode_facts,
        )?;
        let committed_ids = writes.commit(&mut self.store, step)?;
        state.step = step;
        state.wm.round = 0;
        observe(Phase::Commit, &state.wm);

        let retention_snapshot = retention_snapshot(&state.wm, &self.store, config, step)?;
        let token_accounting = gw.ledger().for_turn(step);
        let report = TurnReport {
            turn_index: step,
            message_index,
            query: query.to_string(),
            response,
            read_iterations_used: rounds_used,
            gate_decisions: decisions,
            retrieved_count: retrieved.len(),
            added_count: added_ids.len(),
            added_ids,
            evicted_count: evicted_ids.len(),
            evicted_ids,
            credited_ids: credit.used_memory_ids,
            committed_ids,
            semantic_ids: persisted.semantic_ids,
            episode_id: persisted.episode_id,
            turn_tokens: token_accounting.iter().map(|e| e.prompt_tokens + e.completion_tokens).sum(),
            token_accounting,
            prompt_tokens: count_tokens(system_prompt(Role::Responder)) + count_tokens(&prompt),
            retention_snapshot,
            buffer_size: state.wm.buffer_items.len(),
            history_size: state.wm.history.len(),
            planner_degraded,
            curation_fallback,
        };
        self.state = state;
        self.last_prompt = Some(prompt);
        Ok(report)
    }
}

fn retention_snapshot(wm: &WorkingMemory, store: &Store, config: &EngineConfig, step: TurnIndex) -> Result<Vec<RetentionEntry>> {
    let params = DecayParams::from_config(config);
    let mut out = Vec::new();
    for c in wm.clusters.values() {
        out.push(RetentionEntry {
            id: c.cluster_id.to_string(),
            retention: c.stats.retention_at(step, params)?.value(),
            utility: c.stats.utility,
        });
    }
    for b in &wm.buffer_items {
        if let Some(r) = store.get(&b.memory_id) {
            let stats = r.payload.stats();
            out.push(RetentionEntry {
                id: b.memory_id.to_string(),
                retention: stats.retention_at(step, params)?.value(),
                utility: stats.utility,
            });
        }
    }
    Ok(out)
}

fn label(record: &MemoryRecord) -> &'static str {
    match record {
        MemoryRecord::Episodic(_) => "episode",
        MemoryRecord::Semantic(s) => match s.memory_type {
            MemoryType::Fact => "fact",
            MemoryType::Rule => "rule",
            MemoryType::Preference => "preference",
        },
    }
}

/// Build the responder's user message. Sections in order: behavioral rules,
/// memories (oldest first), topics, task, conversation, current query.
/// Empty sections are left out.
pub fn assemble_prompt(
    wm: &WorkingMemory,
    store: &Store,
    config: &EngineConfig,
    query: &str,
    now: Timestamp,
    step: TurnIndex,
) -> Result<String> {
    let params = DecayParams::from_config(config);
    let mut records: Vec<&MemoryRecord> = wm
        .buffer_items
        .iter()
        .filter_map(|b| store.get(&b.memory_id).map(|r| &r.payload))
        .collect();
    records.sort_by(|a, b| a.created_at().total_cmp(&b.created_at()).then_with(|| a.id().cmp(b.id())));

    let mut out = String::new();
    let rules: Vec<&&MemoryRecord> = records.iter().filter(|r| r.is_rule()).collect();
    if !rules.is_empty() {
        out.push_str("## Behavioral rules\n");
        for r in rules {
            let _ = writeln!(out, "- [rule] {}", r.text());
        }
        out.push('\n');
    }
    let memories: Vec<&&MemoryRecord> = records.iter().filter(|r| !r.is_rule()).collect();
    if !memories.is_empty() {
        out.push_str("## Memories\n");
        for r in memories {
            let elapsed = (now - r.created_at()).max(0.0).round() as i64;
            let retention = r.stats().retention_at(step, params)?.value();
            let _ = writeln!(
                out,
                "- [{}] {} (elapsed_seconds={elapsed}, retention={retention:.3})",
                label(r),
                r.text()
            );
        }
        out.push('\n');
    }
    if config.enabled_levels.l1 {
        let owners: BTreeSet<&ClusterId> = wm.buffer_items.iter().map(|b| &b.cluster_id).collect();
        let shown = wm
            .clusters
            .values()
            .filter(|c| owners.contains(&c.cluster_id) || !c.procedural.is_empty());
        let ranked = rank_clusters(shown, step, params)?;
        if !ranked.is_empty() {
            out.push_str("## Topics\n");
            for rank in ranked {
                let c = &wm.clusters[&rank.cluster_id];
                let _ = writeln!(out, "- {}: {}", c.name, c.summary);
                for p in &c.procedural {
                    let _ = writeln!(out, "  - {p}");
                }
            }
            out.push('\n');
        }
    }
    if !wm.task_metadata.is_empty() {
        out.push_str("## Task\n");
        for (k, v) in &wm.task_metadata {
            let _ = writeln!(out, "- {k}: {v}");
        }
        out.push('\n');
    }
    let earlier: Vec<&Turn> = wm.history.iter().take(wm.history.len().saturating_sub(1)).collect();
    if !earlier.is_empty() {
        out.push_str("## Conversation\n");
        for t in earlier {
            let who = match t.role {
                Speaker::User => "User",
                Speaker::Assistant => "Assistant",
            };
            let _ = writeln!(out, "{who}: {}", t.text);
        }
        out.push('\n');
    }
    out.push_str("## Current query\n");
    out.push_str(query);
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{OfflineModel, Script, ScriptedTransport};
    use crate::store::{FailPoint, HashEmbedder};

    fn session(config: EngineConfig) -> Session {
        let transport = ScriptedTransport::new().with_delegate(Arc::new(OfflineModel));
        Session::new(
            config,
            Store::in_memory(256),
            Gateway::new(Arc::new(transport)),
            Arc::new(HashEmbedder::default()),
            Box::new(ManualClock::default()),
        )
        .unwrap()
    }

    #[test]
    fn first_turn_triggers_on_empty_buffer_and_writes_a_fact() {
        let mut s = session(EngineConfig::default());
        let r = s.step("I keep my spare keys in the blue drawer.").unwrap();
        assert_eq!(r.turn_index, 1);
        assert_eq!(r.read_iterations_used, 3);
        assert!(r.gate_decisions.iter().all(|d| d.triggered));
        assert_eq!(r.response, "Understood.");
        assert_eq!(r.semantic_ids.len(), 1);
        assert_eq!(s.store().len(), 1);
        assert_eq!(s.state().wm.history.len(), 2);
    }

    #[test]
    fn stored_fact_is_recalled_later() {
        let mut s = session(EngineConfig::default());
        s.step("I keep my spare keys in the blue drawer.").unwrap();
        let r = s.step("Where do I keep my spare keys?").unwrap();
        assert!(r.response.contains("blue drawer"), "{}", r.response);
        assert_eq!(r.credited_ids.len(), 1);
        let prompt = s.last_prompt().unwrap();
        assert!(prompt.find("## Memories").unwrap() < prompt.find("## Current query").unwrap());
        let fact = s.store().get(&r.credited_ids[0]).unwrap();
        assert_eq!(fact.payload.stats().access_count, 1);
        assert_eq!(fact.payload.stats().last_access_turn, 2);
    }

    #[test]
    fn episodes_close_every_ep_steps() {
        let mut s = session(EngineConfig {
            episode_length: 2,
            ..EngineConfig::default()
        });
        let a = s.step("I adopted a cat named Miso.").unwrap();
        let b = s.step("Miso likes tuna treats a lot.").unwrap();
        assert!(a.episode_id.is_none());
        let ep = b.episode_id.unwrap();
        let MemoryRecord::Episodic(e) = &s.store().get(&ep).unwrap().payload else { panic!() };
        assert_eq!(e.raw_span, (1, 2));
        assert_eq!(e.linked_facts.len(), 2);
    }

    #[test]
    fn failed_commit_leaves_session_unchanged() {
        let mut s = session(EngineConfig::default());
        s.step("I keep my spare keys in the blue drawer.").unwrap();
        let before = s.state().clone();
        let ids = s.store().ids();
        s.store_mut().set_fail_point(Some(FailPoint::BeforeJournal));
        assert!(s.step("My sister lives in Oslo now.").is_err());
        assert_eq!(s.state(), &before);
        assert_eq!(s.store().ids(), ids);
        s.store_mut().set_fail_point(None);
        assert_eq!(s.step("My sister lives in Oslo now.").unwrap().turn_index, 2);
    }

    #[test]
    fn exhausted_script_is_a_hard_error() {
        let mut t = ScriptedTransport::new();
        t.set_script(Role::Responder, Script::replies(vec![]));
        let mut s = Session::new(
            EngineConfig::default(),
            Store::in_memory(256),
            Gateway::new(Arc::new(t)),
            Arc::new(HashEmbedder::default()),
            Box::new(ManualClock::default()),
        )
        .unwrap();
        let err = s.step("hello there").unwrap_err();
        assert!(err.to_string().contains("script"), "{err}");
    }

    #[test]
    fn prompt_sections_follow_the_fixed_order() {
        let mut s = session(EngineConfig::default());
        s.step("When I say ping, respond with pong.").unwrap();
        s.step("I keep my spare keys in the blue drawer.").unwrap();
        s.step("Where did I put the spare keys?").unwrap();
        let p = s.last_prompt().unwrap();
        let pos = |h: &str| p.find(h).unwrap_or_else(|| panic!("missing {h} in\n{p}"));
        assert!(pos("## Behavioral rules") < pos("## Memories"));
        assert!(pos("## Memories") < pos("## Conversation"));
        assert!(pos("## Conversation") < pos("## Current query"));
        assert!(p.contains("- [rule] When I say ping"));
        assert!(p.contains("elapsed_seconds="));
    }

    #[test]
    fn manual_clock_advances_by_increment() {
        let mut c = ManualClock::new(100.0, 5.0);
        assert_eq!([c.now(), c.now(), c.now()], [100.0, 105.0, 110.0]);
    }
}
