//! Write path: persistence of new memories, credit-driven reinforcement and
//! the single per-turn store commit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decay::reinforce;
use crate::error::Result;
use crate::gateway::GatewayError;
use crate::model::{
    ClusterId, EngineConfig, EpisodicMemory, MemoryId, MemoryRecord, SemanticMemory, Speaker, Timestamp, TurnIndex,
    UsageStats, WorkingMemory,
};
use crate::recognizer::{EpisodeDraft, SemanticCandidate};
use crate::store::{dot, Embedder, Store, StoredRecord};

/// Record versions staged during a turn; nothing reaches the store until
/// [`WriteSet::commit`].
#[derive(Debug, Default)]
pub struct WriteSet {
    pending: BTreeMap<MemoryId, (MemoryRecord, Option<Vec<f64>>)>,
}

impl WriteSet {
    pub fn new() -> Self {
        WriteSet::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    /// The staged version of `id`, or the stored one.
    pub fn current(&self, store: &Store, id: &MemoryId) -> Option<MemoryRecord> {
        match self.pending.get(id) {
            Some((r, _)) => Some(r.clone()),
            None => store.get(id).map(|r| r.payload.clone()),
        }
    }

    fn update(&mut self, store: &Store, id: &MemoryId, f: impl FnOnce(&mut MemoryRecord)) -> bool {
        let Some(mut record) = self.current(store, id) else { return false };
        f(&mut record);
        let embedding = self.pending.remove(id).and_then(|(_, e)| e);
        self.pending.insert(id.clone(), (record, embedding));
        true
    }

    fn insert_new(&mut self, record: MemoryRecord, embedding: Vec<f64>) {
        self.pending.insert(record.id().clone(), (record, Some(embedding)));
    }

    /// Append every staged record in one store commit. Re-versioned records
    /// keep their embedding and original commit turn.
    pub fn commit(self, store: &mut Store, turn: TurnIndex) -> Result<Vec<MemoryId>> {
        let mut batch = Vec::with_capacity(self.pending.len());
        for (id, (record, embedding)) in self.pending {
            let stored = match (embedding, store.get(&id)) {
                (_, Some(prev)) => StoredRecord::new(record, prev.embedding.clone(), prev.committed_turn),
                (Some(e), None) => StoredRecord::new(record, e, turn),
                (None, None) => unreachable!("new records are staged with an embedding"),
            };
            batch.push(stored);
        }
        Ok(store.append(turn, batch)?)
    }
}

/// Pick the cluster for a new memory. Below the match floor a memory stays
/// unclustered when topics are dynamic; static topics always take the best
/// existing match.
pub fn assign_cluster(
    embedding: &[f64],
    wm: &WorkingMemory,
    descriptors: &[(ClusterId, Vec<f64>)],
    config: &EngineConfig,
) -> ClusterId {
    if !config.enabled_levels.l1 {
        return ClusterId::unclustered();
    }
    let best = descriptors
        .iter()
        .filter(|(id, _)| wm.clusters.contains_key(id) && id.as_str() != ClusterId::UNCLUSTERED)
        .map(|(id, d)| (dot(embedding, d), id))
        .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(a.1)));
    match best {
        Some((cos, id)) if cos >= config.cluster_match_floor || !config.dynamic_topics => id.clone(),
        _ => ClusterId::unclustered(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistOutcome {
    pub semantic_ids: Vec<MemoryId>,
    pub episode_id: Option<MemoryId>,
}

/// Stage new L2 facts and, when an episode closed, the L3 episode linked to
/// the facts written since the previous episode.
#[allow(clippy::too_many_arguments)]
pub fn persist(
    wm: &WorkingMemory,
    store: &mut Store,
    writes: &mut WriteSet,
    embedder: &dyn Embedder,
    config: &EngineConfig,
    step: TurnIndex,
    timestamp: Timestamp,
    semantic: &[SemanticCandidate],
    episode: Option<&EpisodeDraft>,
    episode_facts: &mut Vec<MemoryId>,
) -> Result<PersistOutcome, GatewayError> {
    let mut outcome = PersistOutcome::default();
    if semantic.is_empty() && episode.is_none() {
        return Ok(outcome);
    }
    let descriptors: Vec<(ClusterId, Vec<f64>)> = if config.enabled_levels.l1 {
        wm.clusters
            .values()
            .map(|c| Ok((c.cluster_id.clone(), embedder.embed(&c.descriptor())?)))
            .collect::<Result<_, GatewayError>>()?
    } else {
        Vec::new()
    };

    for candidate in semantic {
        let embedding = embedder.embed(&candidate.content)?;
        let id = store.allocate_id();
        let record = MemoryRecord::Semantic(SemanticMemory {
            memory_id: id.clone(),
            content: candidate.content.clone(),
            memory_type: candidate.memory_type,
            created_turn: step,
            created_at: timestamp,
            cluster_id: assign_cluster(&embedding, wm, &descriptors, config),
            stats: UsageStats::fresh(step),
            linked_episodes: BTreeSet::new(),
            source: Speaker::User,
            tags: candidate.tags.clone(),
            attribute: candidate.attribute.clone(),
        });
        writes.insert_new(record, embedding);
        episode_facts.push(id.clone());
        outcome.semantic_ids.push(id);
    }

    if let Some(draft) = episode {
        let embedding = embedder.embed(&draft.preemptive_text)?;
        let id = store.allocate_id();
        let facts: BTreeSet<MemoryId> = if config.linking_active() {
            episode_facts.iter().cloned().collect()
        } else {
            BTreeSet::new()
        };
        for fact in &facts {
            writes.update(store, fact, |r| {
                r.links_mut().insert(id.clone());
            });
        }
        let record = MemoryRecord::Episodic(EpisodicMemory {
            memory_id: id.clone(),
            preemptive_text: draft.preemptive_text.clone(),
            raw_span: draft.raw_span,
            created_turn: step,
            created_at: timestamp,
            cluster_id: assign_cluster(&embedding, wm, &descriptors, config),
            stats: UsageStats::fresh(step),
            linked_facts: facts,
            complete: true,
            raw_fallback: draft.raw_fallback,
        });
        writes.insert_new(record, embedding);
        episode_facts.clear();
        outcome.episode_id = Some(id);
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinforcementReport {
    pub memories: Vec<MemoryId>,
    pub clusters: Vec<ClusterId>,
    /// Linked partners of credited memories, reinforced at half strength.
    pub partners: Vec<MemoryId>,
}

/// Reinforce every credited memory, each resident cluster owning one of them
/// once, and each uncredited linked partner once at half strength. An empty
/// credit set changes nothing.
pub fn apply_reinforcement(
    wm: &mut WorkingMemory,
    store: &Store,
    writes: &mut WriteSet,
    credited: &[MemoryId],
    config: &EngineConfig,
    step: TurnIndex,
) -> ReinforcementReport {
    let delta = config.reinforcement_delta;
    let credited_set: BTreeSet<&MemoryId> = credited.iter().collect();
    let mut report = ReinforcementReport::default();
    let mut clusters = BTreeSet::new();
    let mut partners = BTreeSet::new();
    for id in credited.iter().collect::<BTreeSet<_>>() {
        let Some(record) = writes.current(store, id) else { continue };
        writes.update(store, id, |r| reinforce(r, step, delta));
        report.memories.push(id.clone());
        clusters.insert(record.cluster_id().clone());
        if config.linking_active() {
            partners.extend(record.links().iter().filter(|p| !credited_set.contains(p)).cloned());
        }
    }
    for cluster_id in clusters {
        if let Some(cluster) = wm.clusters.get_mut(&cluster_id) {
            reinforce(cluster, step, delta);
            report.clusters.push(cluster_id);
        }
    }
    for partner in partners {
        if writes.update(store, &partner, |r| reinforce(r, step, delta / 2.0)) {
            report.partners.push(partner);
        }
    }
    report
}
