//! Read-path gatekeeper: uncertainty signals, the retrieval gate and
//! retention-based cluster ranking.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::decay::{clamp_score, DecayParams};
use crate::error::Result;
use crate::gateway::{Gateway, GatewayError, Role};
use crate::model::{Cluster, ClusterId, EngineConfig, MemoryRecord, TurnIndex, WorkingMemory};
use crate::prompts::system_prompt;
use crate::store::{dot, Embedder, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sufficiency {
    Sufficient,
    Partial,
    Insufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalLevel {
    ClusterSummaries,
    ClusterMemoryBuffers,
    MemoryManagerRetrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyAssessment {
    /// `None` when L1 is disabled and the whole buffer is judged at once.
    pub cluster_id: Option<ClusterId>,
    pub utility_score: f64,
    pub uncertainty_score: f64,
    pub sufficiency: Sufficiency,
    pub retrieval_level: RetrievalLevel,
    pub explore: bool,
    /// Set when the judge reply was unusable and the conservative default was used.
    pub fallback: bool,
}

impl UncertaintyAssessment {
    pub const FALLBACK_UNCERTAINTY: f64 = 0.85;

    pub fn fallback(cluster_id: Option<ClusterId>) -> Self {
        UncertaintyAssessment {
            cluster_id,
            utility_score: 0.5,
            uncertainty_score: Self::FALLBACK_UNCERTAINTY,
            sufficiency: Sufficiency::Insufficient,
            retrieval_level: RetrievalLevel::MemoryManagerRetrieval,
            explore: true,
            fallback: true,
        }
    }
}

#[derive(Deserialize)]
struct JudgeReply {
    utility_score: f64,
    uncertainty_score: f64,
    sufficiency: Sufficiency,
    #[serde(default)]
    retrieval_level: Option<RetrievalLevel>,
    #[serde(default)]
    explore: Option<bool>,
}

fn judge_payload(query: &str, cluster: Option<&Cluster>, items: &[&MemoryRecord]) -> String {
    let (experiences, facts): (Vec<&&MemoryRecord>, Vec<&&MemoryRecord>) =
        items.iter().partition(|r| matches!(r, MemoryRecord::Episodic(_)));
    json!({
        "query": query,
        "cluster": cluster.map(|c| json!({"name": c.name, "summary": c.summary, "procedural": c.procedural})),
        "facts": facts.iter().map(|r| json!({"id": r.id(), "content": r.text(), "memory_type": r.memory_type()})).collect::<Vec<_>>(),
        "experiences": experiences.iter().map(|r| json!({"id": r.id(), "content": r.text()})).collect::<Vec<_>>(),
    })
    .to_string()
}

/// Ask the judge whether `cluster` (or the whole buffer, when `None`) already
/// supports `query`. Scores are clamped; an unusable reply yields the
/// conservative fallback. Transport failures are returned to the caller.
pub fn judge_uncertainty(
    query: &str,
    cluster: Option<&Cluster>,
    items: &[&MemoryRecord],
    gateway: &Gateway,
) -> Result<UncertaintyAssessment, GatewayError> {
    let cluster_id = cluster.map(|c| c.cluster_id.clone());
    let reply = gateway.complete::<JudgeReply, _>(
        Role::Judge,
        system_prompt(Role::Judge),
        &judge_payload(query, cluster, items),
        |r| {
            if r.utility_score.is_finite() && r.uncertainty_score.is_finite() {
                Ok(())
            } else {
                Err("scores must be finite numbers".into())
            }
        },
    );
    match reply {
        Ok(c) => {
            let r = c.value;
            let retrieval_level = match r.sufficiency {
                Sufficiency::Sufficient => RetrievalLevel::ClusterSummaries,
                _ => r.retrieval_level.unwrap_or(RetrievalLevel::MemoryManagerRetrieval),
            };
            Ok(UncertaintyAssessment {
                cluster_id,
                utility_score: clamp_score(r.utility_score),
                uncertainty_score: clamp_score(r.uncertainty_score),
                sufficiency: r.sufficiency,
                retrieval_level,
                explore: r.explore.unwrap_or(r.sufficiency != Sufficiency::Sufficient),
                fallback: false,
            })
        }
        Err(GatewayError::Schema { message, .. }) => {
            tracing::warn!("judge reply unusable, using fallback: {message}");
            Ok(UncertaintyAssessment::fallback(cluster_id))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSignal {
    pub mean_cosine: f64,
    /// `1 - mean_cosine`, clipped to [0, 1].
    pub score: f64,
    pub uncertain: bool,
}

/// Signal from precomputed cosines. Uncertain iff the mean is strictly below `threshold`.
pub fn embedding_signal(cosines: &[f64], threshold: f64) -> EmbeddingSignal {
    debug_assert!(!cosines.is_empty());
    let mean_cosine = cosines.iter().sum::<f64>() / cosines.len() as f64;
    EmbeddingSignal {
        mean_cosine,
        score: (1.0 - mean_cosine).clamp(0.0, 1.0),
        uncertain: mean_cosine < threshold,
    }
}

pub fn embedding_uncertainty(
    query: &str,
    item_embeddings: &[&[f64]],
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<EmbeddingSignal, GatewayError> {
    let q = embedder.embed(query)?;
    let cosines: Vec<f64> = item_embeddings.iter().map(|e| dot(&q, e)).collect();
    Ok(embedding_signal(&cosines, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    EmptyBuffer,
    JudgeSignal,
    EmbeddingSignal,
    BothSignals,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub triggered: bool,
    pub reason: GateReason,
    pub judge_uncertain: bool,
    pub embedding_uncertain: bool,
    pub round: u32,
}

/// Empty buffer always triggers; round 1 needs either signal, later rounds both.
pub fn gate(round: u32, buffer: &WorkingMemory, judge_uncertain: bool, embedding_uncertain: bool) -> GateDecision {
    gate_signals(round, !buffer.has_memory_items(), judge_uncertain, embedding_uncertain)
}

pub fn gate_signals(round: u32, buffer_empty: bool, judge_uncertain: bool, embedding_uncertain: bool) -> GateDecision {
    assert!(round >= 1, "rounds are 1-based");
    let decision = |triggered, reason| GateDecision {
        triggered,
        reason,
        judge_uncertain,
        embedding_uncertain,
        round,
    };
    if buffer_empty {
        return decision(true, GateReason::EmptyBuffer);
    }
    let triggered = if round == 1 {
        judge_uncertain || embedding_uncertain
    } else {
        judge_uncertain && embedding_uncertain
    };
    let reason = match (triggered, judge_uncertain, embedding_uncertain) {
        (false, _, _) => GateReason::None,
        (true, true, true) => GateReason::BothSignals,
        (true, true, false) => GateReason::JudgeSignal,
        (true, false, _) => GateReason::EmbeddingSignal,
    };
    decision(triggered, reason)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRank {
    pub cluster_id: ClusterId,
    pub retention: f64,
    pub utility: f64,
}

/// Descending retention x utility; ties by most recent access, then id.
pub fn rank_clusters<'a>(
    clusters: impl IntoIterator<Item = &'a Cluster>,
    current_turn: TurnIndex,
    params: DecayParams,
) -> Result<Vec<ClusterRank>> {
    let mut ranked = clusters
        .into_iter()
        .map(|c| {
            Ok((
                ClusterRank {
                    cluster_id: c.cluster_id.clone(),
                    retention: c.stats.retention_at(current_turn, params)?.value(),
                    utility: c.stats.utility,
                },
                c.stats.last_access_turn,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|(a, la), (b, lb)| {
        (b.retention * b.utility)
            .total_cmp(&(a.retention * a.utility))
            .then_with(|| lb.cmp(la))
            .then_with(|| a.cluster_id.cmp(&b.cluster_id))
    });
    Ok(ranked.into_iter().map(|(r, _)| r).collect())
}

/// Everything the Decayer learned in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAssessment {
    pub assessments: Vec<UncertaintyAssessment>,
    pub judge_available: bool,
    pub embedding: Option<EmbeddingSignal>,
    pub decision: GateDecision,
    /// Buffer non-empty and every judged cluster reported `sufficient`.
    pub sufficient: bool,
}

impl RoundAssessment {
    /// The scalar uncertainty handed downstream for `cluster`: the judge's
    /// score when present, else the embedding score.
    pub fn uncertainty_for(&self, cluster: Option<&ClusterId>) -> Option<f64> {
        self.assessments
            .iter()
            .find(|a| a.cluster_id.as_ref() == cluster)
            .map(|a| a.uncertainty_score)
            .or(self.embedding.map(|e| e.score))
    }
}

/// Run both signals over the current buffer and apply the gate.
///
/// With L1 enabled each cluster owning buffered items is judged separately
/// and any uncertain cluster makes the judge signal true. When one signal is
/// unavailable the other decides alone; when both are, retrieval triggers.
pub fn assess_round(
    query: &str,
    round: u32,
    wm: &WorkingMemory,
    store: &Store,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    config: &EngineConfig,
) -> Result<RoundAssessment> {
    if !wm.has_memory_items() {
        return Ok(RoundAssessment {
            assessments: Vec::new(),
            judge_available: false,
            embedding: None,
            decision: gate_signals(round, true, false, false),
            sufficient: false,
        });
    }
    let records: Vec<&MemoryRecord> = wm
        .buffer_items
        .iter()
        .filter_map(|b| store.get(&b.memory_id).map(|r| &r.payload))
        .collect();

    let mut assessments = Vec::new();
    let mut judge_available = true;
    let groups: Vec<(Option<&Cluster>, Vec<&MemoryRecord>)> = if config.enabled_levels.l1 {
        wm.clusters
            .values()
            .map(|c| (Some(c), records.iter().copied().filter(|r| r.cluster_id() == &c.cluster_id).collect::<Vec<_>>()))
            .filter(|(_, items)| !items.is_empty())
            .collect()
    } else {
        vec![(None, records.clone())]
    };
    for (cluster, items) in groups {
        match judge_uncertainty(query, cluster, &items, gateway) {
            Ok(a) => assessments.push(a),
            Err(e) if e.is_hard() => return Err(e.into()),
            Err(e) => {
                tracing::warn!("judge unavailable, embedding signal decides: {e}");
                judge_available = false;
                assessments.clear();
                break;
            }
        }
    }

    let embeddings: Vec<&[f64]> = wm
        .buffer_items
        .iter()
        .filter_map(|b| store.get(&b.memory_id).map(|r| r.embedding.as_slice()))
        .collect();
    let embedding = match embedding_uncertainty(query, &embeddings, embedder, config.embedding_threshold) {
        Ok(s) => Some(s),
        Err(e) if e.is_hard() => return Err(e.into()),
        Err(e) => {
            tracing::warn!("embedder unavailable, judge signal decides: {e}");
            None
        }
    };

    let judge_signal = judge_available
        .then(|| assessments.iter().any(|a| a.uncertainty_score >= config.judge_threshold));
    let embedding_signal = embedding.map(|e| e.uncertain);
    let (judge_uncertain, embedding_uncertain) = match (judge_signal, embedding_signal) {
        (Some(j), Some(e)) => (j, e),
        (Some(j), None) => (j, j),
        (None, Some(e)) => (e, e),
        (None, None) => (true, true),
    };
    let sufficient = judge_available
        && !assessments.is_empty()
        && assessments.iter().all(|a| a.sufficiency == Sufficiency::Sufficient);
    Ok(RoundAssessment {
        assessments,
        judge_available,
        embedding,
        decision: gate_signals(round, false, judge_uncertain, embedding_uncertain),
        sufficient,
    })
}
