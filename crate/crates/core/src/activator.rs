//! Read-path retrieval: query expansion into a DAG, global cosine search with
//! L2-L3 link following, and curation of the bounded buffer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::decay::DecayParams;
use crate::error::Result;
use crate::gateway::{Gateway, GatewayError, Role};
use crate::model::{BufferEntry, Cluster, ClusterId, EngineConfig, Level, LevelSet, MemoryId, MemoryRecord, TurnIndex, WorkingMemory};
use crate::prompts::system_prompt;
use crate::store::{dot, Embedder, Store};

pub const Q0: &str = "q0";
/// Expansion nodes allowed per uncertain cluster (at least one cluster's worth).
pub const MAX_EXPANSIONS_PER_CLUSTER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Semantic,
    Episodic,
}

impl QueryType {
    pub fn level(self) -> Level {
        match self {
            QueryType::Semantic => Level::L2,
            QueryType::Episodic => Level::L3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relationship {
    DependsOn,
    Refines,
    Complements,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryNode {
    pub id: String,
    pub text: String,
    pub query_type: QueryType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_cluster: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEdge {
    pub from: String,
    pub to: String,
    pub relationship: Relationship,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryDag {
    pub nodes: Vec<QueryNode>,
    pub edges: Vec<QueryEdge>,
    /// The planner was unavailable and only the original query is searched.
    #[serde(default)]
    pub degraded: bool,
}

impl QueryDag {
    pub fn single(query: &str) -> Self {
        QueryDag {
            nodes: vec![QueryNode {
                id: Q0.into(),
                text: query.into(),
                query_type: QueryType::Semantic,
                target_cluster: None,
            }],
            edges: Vec::new(),
            degraded: true,
        }
    }

    /// Repair planner output: unique non-empty nodes, q0 carrying `query`
    /// verbatim, at most `max_expansions` other nodes, and only edges between
    /// known nodes that keep the graph acyclic.
    pub fn enforce(mut self, query: &str, max_expansions: usize) -> Self {
        let mut seen = BTreeSet::new();
        self.nodes.retain(|n| !n.text.trim().is_empty() && seen.insert(n.id.clone()));
        match self.nodes.iter().position(|n| n.id == Q0) {
            Some(i) => {
                let q0 = self.nodes.remove(i);
                self.nodes.insert(0, QueryNode { text: query.into(), ..q0 });
            }
            None => self.nodes.insert(
                0,
                QueryNode {
                    id: Q0.into(),
                    text: query.into(),
                    query_type: QueryType::Semantic,
                    target_cluster: None,
                },
            ),
        }
        self.nodes.retain(|n| n.id == Q0 || n.text != query);
        self.nodes.truncate(1 + max_expansions);

        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let mut accepted: Vec<QueryEdge> = Vec::new();
        for edge in self.edges {
            if edge.from == edge.to || !ids.contains(edge.from.as_str()) || !ids.contains(edge.to.as_str()) {
                continue;
            }
            if accepted.iter().any(|e| e.from == edge.from && e.to == edge.to) {
                continue;
            }
            if reachable(&accepted, &edge.to, &edge.from) {
                tracing::debug!(from = %edge.from, to = %edge.to, "dropping cycle-forming edge");
                continue;
            }
            accepted.push(edge);
        }
        self.edges = accepted;
        self
    }

    pub fn is_acyclic(&self) -> bool {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
        for e in &self.edges {
            *indegree.entry(e.to.as_str()).or_default() += 1;
        }
        let mut ready: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut visited = 0;
        while let Some(n) = ready.pop() {
            visited += 1;
            for e in self.edges.iter().filter(|e| e.from == n) {
                let d = indegree.get_mut(e.to.as_str()).expect("edge endpoints are nodes");
                *d -= 1;
                if *d == 0 {
                    ready.push(e.to.as_str());
                }
            }
        }
        visited == indegree.len()
    }

    pub fn q0(&self) -> Option<&QueryNode> {
        self.nodes.iter().find(|n| n.id == Q0)
    }
}

fn reachable(edges: &[QueryEdge], from: &str, to: &str) -> bool {
    let mut stack = vec![from];
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            stack.extend(edges.iter().filter(|e| e.from == n).map(|e| e.to.as_str()));
        }
    }
    false
}

#[derive(Deserialize)]
struct PlanReply {
    nodes: Vec<QueryNode>,
    #[serde(default)]
    edges: Vec<QueryEdge>,
}

/// A cluster the Decayer flagged, as shown to the planner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertainCluster {
    pub name: String,
    pub summary: String,
    pub uncertainty: f64,
}

/// Expand `query` into a validated DAG. Planner failure degrades to `{q0}`.
pub fn expand_query(query: &str, uncertain: &[UncertainCluster], gateway: &Gateway) -> Result<QueryDag, GatewayError> {
    let payload = json!({"query": query, "uncertain_clusters": uncertain}).to_string();
    let reply = gateway.complete::<PlanReply, _>(Role::Planner, system_prompt(Role::Planner), &payload, |r| {
        if r.nodes.is_empty() {
            Err("nodes must not be empty".into())
        } else {
            Ok(())
        }
    });
    let max = MAX_EXPANSIONS_PER_CLUSTER * uncertain.len().max(1);
    match reply {
        Ok(c) => Ok(QueryDag {
            nodes: c.value.nodes,
            edges: c.value.edges,
            degraded: false,
        }
        .enforce(query, max)),
        Err(e) if e.is_hard() => Err(e),
        Err(e) => {
            tracing::warn!("planner unavailable, searching the original query only: {e}");
            Ok(QueryDag::single(query))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub memory_id: MemoryId,
    pub similarity: f64,
    pub source_node: String,
    /// Pulled in through an L2-L3 link of a q0 hit rather than by search.
    pub via_link: bool,
}

/// Search every node over the whole store; q0 covers every enabled level,
/// other nodes the level of their query type. Hits with non-positive cosine
/// carry no evidence and are dropped. With linking on, q0 hits pull their
/// linked partners. Candidates are unique by id, best similarity first.
pub fn retrieve(
    dag: &QueryDag,
    store: &Store,
    embedder: &dyn Embedder,
    k_per_query: usize,
    memory_linking: bool,
    levels: LevelSet,
) -> Result<Vec<Candidate>, GatewayError> {
    let mut best: BTreeMap<MemoryId, Candidate> = BTreeMap::new();
    let mut offer = |c: Candidate| match best.get(&c.memory_id) {
        Some(existing) if existing.similarity >= c.similarity => {}
        _ => {
            best.insert(c.memory_id.clone(), c);
        }
    };
    for node in &dag.nodes {
        let query = embedder.embed(&node.text)?;
        let searched: Vec<Level> = if node.id == Q0 {
            [Level::L2, Level::L3].into_iter().filter(|l| levels.contains(*l)).collect()
        } else {
            Some(node.query_type.level()).filter(|l| levels.contains(*l)).into_iter().collect()
        };
        for level in searched {
            for hit in store.search(&query, Some(level), k_per_query) {
                if hit.cosine <= 0.0 {
                    continue;
                }
                if node.id == Q0 && memory_linking {
                    let partners = store.get(&hit.memory_id).map(|r| r.payload.links().clone()).unwrap_or_default();
                    for partner in partners {
                        let Some(record) = store.get(&partner) else { continue };
                        if levels.contains(record.level) {
                            offer(Candidate {
                                memory_id: partner,
                                similarity: dot(&query, &record.embedding),
                                source_node: node.id.clone(),
                                via_link: true,
                            });
                        }
                    }
                }
                offer(Candidate {
                    memory_id: hit.memory_id,
                    similarity: hit.cosine,
                    source_node: node.id.clone(),
                    via_link: false,
                });
            }
        }
    }
    let mut out: Vec<Candidate> = best.into_values().collect();
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.memory_id.cmp(&b.memory_id)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    KeepOld,
    KeepNew,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictResolution {
    pub old_id: MemoryId,
    pub new_id: MemoryId,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationPlan {
    /// Buffer items retained, in buffer order.
    pub kept: Vec<MemoryId>,
    /// Candidates loaded into the buffer, in candidate order.
    pub added: Vec<MemoryId>,
    /// Buffer items removed from the buffer (never from the store).
    pub evicted: Vec<MemoryId>,
    pub resolutions: Vec<ConflictResolution>,
    /// The curator model was unavailable and the rule-based proposal was used.
    pub rule_based: bool,
}

#[derive(Deserialize)]
struct CuratorReply {
    #[serde(default)]
    added: Vec<MemoryId>,
    #[serde(default)]
    deleted: Vec<MemoryId>,
    #[serde(default)]
    conflict_resolutions: Vec<ConflictResolution>,
}

fn curator_item(record: &MemoryRecord, retention: f64) -> serde_json::Value {
    json!({
        "id": record.id(),
        "content": record.text(),
        "memory_type": record.memory_type(),
        "created_turn": record.created_turn(),
        "retention": retention,
        "utility": record.stats().utility,
    })
}

fn normalized_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

struct Item<'a> {
    record: &'a MemoryRecord,
    retention: f64,
    similarity: f64,
    loaded_turn: TurnIndex,
}

/// Merge candidates into the buffer.
///
/// The curator model (or, when it is unavailable, a rule that adds every new
/// candidate) proposes additions, deletions and conflict resolutions. The
/// proposal is then enforced deterministically: rules are never evicted,
/// exact-text duplicates keep the higher-utility copy, attribute conflicts
/// keep the newer fact, items below the eviction threshold that were not
/// loaded this turn are evicted, and capacity is restored by evicting buffer
/// items in ascending retention (older, then lower id first) before dropping
/// the least similar new candidates.
#[allow(clippy::too_many_arguments)]
pub fn curate(
    query: &str,
    wm: &WorkingMemory,
    candidates: &[Candidate],
    store: &Store,
    current_turn: TurnIndex,
    config: &EngineConfig,
    gateway: Option<&Gateway>,
) -> Result<CurationPlan> {
    let params = DecayParams::from_config(config);
    let mut items: BTreeMap<MemoryId, Item> = BTreeMap::new();
    for entry in &wm.buffer_items {
        let Some(stored) = store.get(&entry.memory_id) else { continue };
        items.insert(
            entry.memory_id.clone(),
            Item {
                record: &stored.payload,
                retention: stored.payload.stats().retention_at(current_turn, params)?.value(),
                similarity: f64::INFINITY,
                loaded_turn: entry.loaded_turn,
            },
        );
    }
    let fresh: Vec<&Candidate> = candidates.iter().filter(|c| !wm.contains_item(&c.memory_id)).collect();
    let mut new_items: BTreeMap<MemoryId, Item> = BTreeMap::new();
    for c in &fresh {
        let Some(stored) = store.get(&c.memory_id) else { continue };
        new_items.insert(
            c.memory_id.clone(),
            Item {
                record: &stored.payload,
                retention: stored.payload.stats().retention_at(current_turn, params)?.value(),
                similarity: c.similarity,
                loaded_turn: current_turn,
            },
        );
    }

    let mut plan = CurationPlan::default();
    let proposal = match gateway {
        Some(gw) if !new_items.is_empty() || !items.is_empty() => {
            let payload = json!({
                "query": query,
                "old_buffer": items.values().map(|i| curator_item(i.record, i.retention)).collect::<Vec<_>>(),
                "new_memories": new_items.values().map(|i| curator_item(i.record, i.retention)).collect::<Vec<_>>(),
                "capacity": config.buffer_capacity,
            })
            .to_string();
            match gw.complete::<CuratorReply, _>(Role::Curator, system_prompt(Role::Curator), &payload, |_| Ok(())) {
                Ok(c) => Some(c.value),
                Err(e) if e.is_hard() => return Err(e.into()),
                Err(e) => {
                    tracing::debug!("curator unavailable, rule-based curation: {e}");
                    None
                }
            }
        }
        _ => None,
    };
    let mut selected: BTreeSet<MemoryId> = items.keys().cloned().collect();
    match proposal {
        Some(reply) => {
            selected.extend(reply.added.into_iter().filter(|id| new_items.contains_key(id)));
            for id in reply.deleted {
                if items.get(&id).is_some_and(|i| !i.record.is_rule()) {
                    selected.remove(&id);
                }
            }
            for r in reply.conflict_resolutions {
                let loser = match r.resolution {
                    Resolution::KeepNew => &r.old_id,
                    Resolution::KeepOld => &r.new_id,
                    Resolution::Merge => {
                        plan.resolutions.push(r);
                        continue;
                    }
                };
                let known = |id: &MemoryId| items.contains_key(id) || new_items.contains_key(id);
                if known(&r.old_id) && known(&r.new_id) {
                    remove_unless_rule(&mut selected, &items, &new_items, loser);
                    plan.resolutions.push(r);
                }
            }
        }
        None => {
            plan.rule_based = true;
            selected.extend(new_items.keys().cloned());
        }
    }
    let lookup = |id: &MemoryId| items.get(id).or_else(|| new_items.get(id)).expect("selected ids are known");

    // Exact duplicates: keep higher utility, then newer, then lower id.
    let mut by_text: BTreeMap<String, Vec<MemoryId>> = BTreeMap::new();
    for id in &selected {
        by_text.entry(normalized_text(lookup(id).record.text())).or_default().push(id.clone());
    }
    for group in by_text.into_values().filter(|g| g.len() > 1) {
        let winner = group
            .iter()
            .max_by(|a, b| {
                let (ra, rb) = (lookup(a).record, lookup(b).record);
                ra.stats()
                    .utility
                    .total_cmp(&rb.stats().utility)
                    .then_with(|| ra.created_turn().cmp(&rb.created_turn()))
                    .then_with(|| b.cmp(a))
            })
            .expect("non-empty group")
            .clone();
        for id in group.iter().filter(|id| **id != winner) {
            remove_unless_rule(&mut selected, &items, &new_items, id);
        }
    }

    // Attribute conflicts: the newest fact about an attribute wins.
    let mut by_attribute: BTreeMap<String, Vec<MemoryId>> = BTreeMap::new();
    for id in &selected {
        if let Some(attr) = lookup(id).record.attribute() {
            by_attribute.entry(attr.to_string()).or_default().push(id.clone());
        }
    }
    for group in by_attribute.into_values().filter(|g| g.len() > 1) {
        let newest = group
            .iter()
            .max_by(|a, b| {
                let (ra, rb) = (lookup(a).record, lookup(b).record);
                ra.created_turn().cmp(&rb.created_turn()).then_with(|| a.cmp(b))
            })
            .expect("non-empty group")
            .clone();
        for old in group.iter().filter(|id| **id != newest) {
            if remove_unless_rule(&mut selected, &items, &new_items, old) {
                plan.resolutions.push(ConflictResolution {
                    old_id: old.clone(),
                    new_id: newest.clone(),
                    resolution: Resolution::KeepNew,
                });
            }
        }
    }

    // Stale buffer items, sparing anything loaded during this turn.
    for (id, item) in &items {
        if item.retention < config.eviction_threshold && !item.record.is_rule() && item.loaded_turn < current_turn {
            selected.remove(id);
        }
    }

    // Capacity.
    let mut evictable: Vec<&MemoryId> = selected
        .iter()
        .filter(|id| items.get(*id).is_some_and(|i| !i.record.is_rule()))
        .collect();
    evictable.sort_by(|a, b| {
        let (ia, ib) = (&items[*a], &items[*b]);
        ia.retention
            .total_cmp(&ib.retention)
            .then_with(|| ia.record.created_turn().cmp(&ib.record.created_turn()))
            .then_with(|| a.cmp(b))
    });
    let mut overflow = selected.len().saturating_sub(config.buffer_capacity);
    let mut to_remove: Vec<MemoryId> = evictable.iter().take(overflow).map(|id| (*id).clone()).collect();
    overflow -= to_remove.len();
    if overflow > 0 {
        let mut surplus: Vec<&MemoryId> = selected.iter().filter(|id| new_items.contains_key(*id)).collect();
        surplus.sort_by(|a, b| {
            new_items[*a]
                .similarity
                .total_cmp(&new_items[*b].similarity)
                .then_with(|| b.cmp(a))
        });
        to_remove.extend(surplus.into_iter().take(overflow).cloned());
    }
    for id in to_remove {
        selected.remove(&id);
    }

    plan.kept = wm.buffer_items.iter().map(|b| b.memory_id.clone()).filter(|id| selected.contains(id)).collect();
    plan.evicted = wm.buffer_items.iter().map(|b| b.memory_id.clone()).filter(|id| !selected.contains(id)).collect();
    plan.added = fresh.iter().map(|c| c.memory_id.clone()).filter(|id| selected.contains(id)).collect();
    debug_assert!(plan.kept.len() + plan.added.len() <= config.buffer_capacity.max(plan.kept.len()));
    Ok(plan)
}

/// Returns whether `id` was removed; buffered rules stay.
fn remove_unless_rule(
    selected: &mut BTreeSet<MemoryId>,
    items: &BTreeMap<MemoryId, Item>,
    new_items: &BTreeMap<MemoryId, Item>,
    id: &MemoryId,
) -> bool {
    let protected = items.get(id).is_some_and(|i| i.record.is_rule());
    if protected {
        return false;
    }
    debug_assert!(items.contains_key(id) || new_items.contains_key(id));
    selected.remove(id)
}

/// Make sure a cluster id referenced by the buffer is resident.
pub fn ensure_resident(wm: &mut WorkingMemory, cluster_id: &ClusterId, turn: TurnIndex) {
    if !wm.clusters.contains_key(cluster_id) {
        wm.clusters.insert(
            cluster_id.clone(),
            Cluster::new(cluster_id.clone(), "unclustered", "Memories that match no topic.", turn),
        );
    }
}

/// Apply `plan` to the working memory.
pub fn apply_plan(wm: &mut WorkingMemory, plan: &CurationPlan, store: &Store, current_turn: TurnIndex) {
    let keep: BTreeSet<&MemoryId> = plan.kept.iter().collect();
    wm.buffer_items.retain(|b| keep.contains(&b.memory_id));
    for id in &plan.added {
        let Some(record) = store.get(id) else { continue };
        let cluster_id = record.payload.cluster_id().clone();
        ensure_resident(wm, &cluster_id, current_turn);
        wm.buffer_items.push(BufferEntry {
            memory_id: id.clone(),
            level: record.level,
            cluster_id,
            loaded_turn: current_turn,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Script, ScriptedTransport};
    use crate::model::{MemoryType, SemanticMemory, Speaker, UsageStats};
    use crate::store::{HashEmbedder, StoredRecord};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn planner(reply: &str) -> Gateway {
        let mut t = ScriptedTransport::new();
        t.set_script(Role::Planner, Script::constant(reply));
        Gateway::new(Arc::new(t))
    }

    fn node(id: &str, text: &str) -> QueryNode {
        QueryNode {
            id: id.into(),
            text: text.into(),
            query_type: QueryType::Semantic,
            target_cluster: None,
        }
    }

    fn edge(from: &str, to: &str) -> QueryEdge {
        QueryEdge {
            from: from.into(),
            to: to.into(),
            relationship: Relationship::DependsOn,
        }
    }

    #[test]
    fn simple_query_keeps_planner_nodes() {
        let gw = planner(
            r#"{"nodes": [{"id": "q0", "text": "What drink did I order?", "query_type": "semantic"}, {"id": "q1", "text": "drink order", "query_type": "semantic"}], "edges": [{"from": "q0", "to": "q1", "relationship": "refines"}]}"#,
        );
        let dag = expand_query("What drink did I order?", &[], &gw).unwrap();
        assert_eq!(dag.nodes.len(), 2);
        assert_eq!(dag.q0().unwrap().text, "What drink did I order?");
        assert!(!dag.degraded);
    }

    #[test]
    fn cycle_edges_are_dropped() {
        let dag = QueryDag {
            nodes: vec![node("q0", "x"), node("a", "a"), node("b", "b")],
            edges: vec![edge("q0", "a"), edge("a", "b"), edge("b", "q0"), edge("a", "zz")],
            degraded: false,
        }
        .enforce("x", 5);
        assert_eq!(dag.edges, vec![edge("q0", "a"), edge("a", "b")]);
        assert!(dag.is_acyclic());
    }

    #[test]
    fn missing_q0_is_inserted_verbatim() {
        let dag = QueryDag {
            nodes: vec![node("n1", "rephrased")],
            edges: vec![],
            degraded: false,
        }
        .enforce("Original?", 5);
        assert_eq!(dag.nodes[0], node("q0", "Original?"));
        let dag = QueryDag {
            nodes: vec![node("q0", "paraphrase")],
            edges: vec![],
            degraded: false,
        }
        .enforce("Original?", 5);
        assert_eq!(dag.nodes, vec![node("q0", "Original?")]);
    }

    #[test]
    fn planner_outage_degrades_to_q0() {
        let dag = expand_query("hello?", &[], &planner("!unavailable")).unwrap();
        assert_eq!(dag, QueryDag::single("hello?"));
    }

    proptest! {
        #[test]
        fn enforced_dags_are_valid(
            n in 0usize..12,
            raw_edges in proptest::collection::vec((0usize..14, 0usize..14), 0..40),
            with_q0 in any::<bool>(),
        ) {
            let mut nodes: Vec<QueryNode> = (0..n).map(|i| node(&format!("n{i}"), &format!("text {i}"))).collect();
            if with_q0 {
                nodes.push(node("q0", "something else"));
            }
            let name = |i: usize| if i == 13 { "q0".to_string() } else { format!("n{i}") };
            let edges = raw_edges.into_iter().map(|(a, b)| edge(&name(a), &name(b))).collect();
            let dag = QueryDag { nodes, edges, degraded: false }.enforce("the query", 5);
            prop_assert!(dag.is_acyclic());
            prop_assert_eq!(dag.q0().map(|n| n.text.as_str()), Some("the query"));
            prop_assert!(dag.nodes.len() <= 6);
            let ids: BTreeSet<_> = dag.nodes.iter().map(|n| n.id.clone()).collect();
            prop_assert_eq!(ids.len(), dag.nodes.len());
            for e in &dag.edges {
                prop_assert!(ids.contains(&e.from) && ids.contains(&e.to));
            }
        }
    }

    fn fact(store: &mut Store, content: &str, turn: TurnIndex, memory_type: MemoryType, attribute: Option<&str>) -> MemoryId {
        let id = store.allocate_id();
        let record = MemoryRecord::Semantic(SemanticMemory {
            memory_id: id.clone(),
            content: content.into(),
            memory_type,
            created_turn: turn,
            created_at: turn as f64,
            cluster_id: ClusterId::unclustered(),
            stats: UsageStats::fresh(turn),
            linked_episodes: BTreeSet::new(),
            source: Speaker::User,
            tags: vec![],
            attribute: attribute.map(str::to_string),
        });
        let emb = HashEmbedder::default().embed(content).unwrap();
        store.append(turn, vec![StoredRecord::new(record, emb, turn)]).unwrap();
        id
    }

    #[test]
    fn retrieval_returns_top_k_by_cosine() {
        let mut store = Store::in_memory(256);
        let e = HashEmbedder::default();
        let a = fact(&mut store, "red apple pie", 1, MemoryType::Fact, None);
        let b = fact(&mut store, "red apple", 1, MemoryType::Fact, None);
        fact(&mut store, "red car", 1, MemoryType::Fact, None);
        let dag = QueryDag::single("red apple");
        let out = retrieve(&dag, &store, &e, 2, false, LevelSet::ALL).unwrap();
        let ids: Vec<_> = out.iter().map(|c| c.memory_id.clone()).collect();
        assert_eq!(ids, vec![b, a]);
    }

    #[test]
    fn episodic_node_skips_semantic_store() {
        let mut store = Store::in_memory(256);
        fact(&mut store, "red apple", 1, MemoryType::Fact, None);
        let dag = QueryDag {
            nodes: vec![node("q0", "zzz"), QueryNode { query_type: QueryType::Episodic, ..node("e1", "red apple") }],
            edges: vec![],
            degraded: false,
        };
        let out = retrieve(&dag, &store, &HashEmbedder::default(), 5, true, LevelSet::ALL).unwrap();
        assert!(out.is_empty());
    }

    fn config(capacity: usize) -> EngineConfig {
        EngineConfig {
            buffer_capacity: capacity,
            ..EngineConfig::default()
        }
    }

    fn load(wm: &mut WorkingMemory, store: &Store, ids: &[MemoryId], turn: TurnIndex) {
        let plan = CurationPlan {
            added: ids.to_vec(),
            kept: wm.buffer_ids(),
            ..CurationPlan::default()
        };
        apply_plan(wm, &plan, store, turn);
    }

    fn candidate(id: &MemoryId, similarity: f64) -> Candidate {
        Candidate {
            memory_id: id.clone(),
            similarity,
            source_node: Q0.into(),
            via_link: false,
        }
    }

    #[test]
    fn full_buffer_evicts_lowest_retention_fact() {
        let mut store = Store::in_memory(256);
        let old = fact(&mut store, "old fact", 1, MemoryType::Fact, None);
        let newer = fact(&mut store, "newer fact", 5, MemoryType::Fact, None);
        let incoming = fact(&mut store, "incoming fact", 6, MemoryType::Fact, None);
        let mut wm = WorkingMemory::default();
        load(&mut wm, &store, &[old.clone(), newer.clone()], 5);
        let plan = curate("q", &wm, &[candidate(&incoming, 0.5)], &store, 8, &config(2), None).unwrap();
        assert_eq!(plan.evicted, vec![old]);
        assert_eq!(plan.added, vec![incoming]);
        assert_eq!(plan.kept, vec![newer]);
        assert!(plan.rule_based);
    }

    #[test]
    fn rules_are_skipped_by_eviction() {
        let mut store = Store::in_memory(256);
        let rule = fact(&mut store, "when I say hi respond bye", 1, MemoryType::Rule, None);
        let f = fact(&mut store, "some fact", 5, MemoryType::Fact, None);
        let incoming = fact(&mut store, "incoming fact", 6, MemoryType::Fact, None);
        let mut wm = WorkingMemory::default();
        load(&mut wm, &store, &[rule.clone(), f.clone()], 5);
        let plan = curate("q", &wm, &[candidate(&incoming, 0.5)], &store, 8, &config(2), None).unwrap();
        assert_eq!(plan.evicted, vec![f]);
        assert_eq!(plan.kept, vec![rule]);
    }

    #[test]
    fn newer_fact_supersedes_older_attribute() {
        let mut store = Store::in_memory(256);
        let old = fact(&mut store, "The skirt is in the pantry", 3, MemoryType::Fact, Some("skirt.location"));
        let new = fact(&mut store, "The skirt was moved to the bottle", 5, MemoryType::Fact, Some("skirt.location"));
        let mut wm = WorkingMemory::default();
        load(&mut wm, &store, &[old.clone()], 5);
        let plan = curate("q", &wm, &[candidate(&new, 0.4)], &store, 6, &config(10), None).unwrap();
        assert_eq!(plan.evicted, vec![old.clone()]);
        assert_eq!(plan.added, vec![new.clone()]);
        assert_eq!(
            plan.resolutions,
            vec![ConflictResolution { old_id: old.clone(), new_id: new, resolution: Resolution::KeepNew }]
        );
        assert!(store.get(&old).is_some());
    }

    #[test]
    fn exact_duplicates_keep_one_copy() {
        let mut store = Store::in_memory(256);
        let a = fact(&mut store, "Likes tea", 1, MemoryType::Fact, None);
        let b = fact(&mut store, "likes  tea", 2, MemoryType::Fact, None);
        let wm = WorkingMemory::default();
        let plan = curate("q", &wm, &[candidate(&a, 0.9), candidate(&b, 0.8)], &store, 3, &config(10), None).unwrap();
        assert_eq!(plan.added, vec![b]);
    }

    #[test]
    fn stale_items_are_evicted_unless_loaded_this_turn() {
        let mut store = Store::in_memory(256);
        let stale = fact(&mut store, "ancient fact", 1, MemoryType::Fact, None);
        let mut wm = WorkingMemory::default();
        load(&mut wm, &store, &[stale.clone()], 2);
        // S = 6 turns, retention at turn 40 is exp(-39/6) < 0.05.
        let plan = curate("q", &wm, &[], &store, 40, &config(10), None).unwrap();
        assert_eq!(plan.evicted, vec![stale.clone()]);
        let mut wm = WorkingMemory::default();
        load(&mut wm, &store, &[stale], 40);
        assert!(curate("q", &wm, &[], &store, 40, &config(10), None).unwrap().evicted.is_empty());
    }

    #[test]
    fn curator_proposal_is_enforced() {
        let mut store = Store::in_memory(256);
        let rule = fact(&mut store, "always answer in French", 1, MemoryType::Rule, None);
        let f = fact(&mut store, "some fact", 2, MemoryType::Fact, None);
        let c = fact(&mut store, "candidate", 3, MemoryType::Fact, None);
        let mut wm = WorkingMemory::default();
        load(&mut wm, &store, &[rule.clone(), f.clone()], 3);
        let reply = format!(r#"{{"kept": [], "added": ["{c}"], "deleted": ["{rule}", "{f}"], "conflict_resolutions": []}}"#);
        let mut t = ScriptedTransport::new();
        t.set_script(Role::Curator, Script::constant(reply));
        let gw = Gateway::new(Arc::new(t));
        let plan = curate("q", &wm, &[candidate(&c, 0.3)], &store, 4, &config(10), Some(&gw)).unwrap();
        assert_eq!(plan.kept, vec![rule]);
        assert_eq!(plan.evicted, vec![f]);
        assert_eq!(plan.added, vec![c]);
        assert!(!plan.rule_based);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn curation_respects_capacity_and_rules(
            capacity in 1usize..8,
            buffered in proptest::collection::vec((any::<bool>(), 1u64..30), 0..8),
            incoming in 0usize..24,
        ) {
            let mut store = Store::in_memory(256);
            let mut wm = WorkingMemory::default();
            let mut ids = Vec::new();
            for (i, (is_rule, turn)) in buffered.iter().enumerate().take(capacity) {
                let kind = if *is_rule { MemoryType::Rule } else { MemoryType::Fact };
                ids.push(fact(&mut store, &format!("buffered {i}"), *turn, kind, None));
            }
            load(&mut wm, &store, &ids, 30);
            let cands: Vec<Candidate> = (0..incoming)
                .map(|i| {
                    let id = fact(&mut store, &format!("incoming {i}"), 31, MemoryType::Fact, None);
                    candidate(&id, 1.0 / (i + 1) as f64)
                })
                .collect();
            let before = store.ids();
            let plan = curate("q", &wm, &cands, &store, 32, &config(capacity), None).unwrap();
            apply_plan(&mut wm, &plan, &store, 32);
            prop_assert!(wm.buffer_items.len() <= capacity);
            let kept: BTreeSet<_> = plan.kept.iter().collect();
            prop_assert!(plan.evicted.iter().all(|id| !kept.contains(id)));
            for id in &plan.evicted {
                prop_assert!(!store.get(id).unwrap().payload.is_rule());
            }
            prop_assert_eq!(store.ids(), before);
        }
    }
}
