//! Fixtures shared by the engine benchmarks.

use std::collections::BTreeSet;
use std::sync::Arc;

use decaymem::gateway::Gateway;
use decaymem::{
    ClusterId, EngineConfig, HashEmbedder, ManualClock, MemoryRecord, MemoryType, OfflineModel, SemanticMemory,
    Session, Speaker, Store, StoredRecord, UsageStats,
};
use decaymem::store::Embedder;

/// An in-memory store holding `n` short synthetic facts.
pub fn populated_store(n: usize) -> Store {
    let embedder = HashEmbedder::default();
    let mut store = Store::in_memory(embedder.dimension());
    let mut batch = Vec::with_capacity(n);
    for i in 0..n {
        let id = store.allocate_id();
        let content = format!("fact {i} about topic {} and item {}", i % 37, i % 101);
        let embedding = embedder.embed(&content).expect("hash embedder is infallible");
        let record = MemoryRecord::Semantic(SemanticMemory {
            memory_id: id,
            content,
            memory_type: MemoryType::Fact,
            created_turn: 1,
            created_at: 0.0,
            cluster_id: ClusterId::unclustered(),
            stats: UsageStats::fresh(1),
            linked_episodes: BTreeSet::new(),
            source: Speaker::User,
            tags: Vec::new(),
            attribute: None,
        });
        batch.push(StoredRecord::new(record, embedding, 1));
    }
    store.append(1, batch).expect("valid records");
    store
}

/// A session backed by the offline model.
pub fn offline_session(config: EngineConfig) -> Session {
    Session::new(
        config,
        Store::in_memory(decaymem::store::TEST_EMBEDDING_DIM),
        Gateway::new(Arc::new(OfflineModel)),
        Arc::new(HashEmbedder::default()),
        Box::new(ManualClock::default()),
    )
    .expect("default config is valid")
}
