//! Hierarchical conversational memory with utility-weighted decay.
//!
//! Memories live at three levels: topic clusters (L1), semantic facts (L2)
//! and interaction episodes (L3). A bounded working buffer holds what the
//! responder sees; an append-only store keeps everything ever written.
//! Retention decays with turns since last access and is refreshed only when
//! a memory is credited for a response.

pub mod activator;
pub mod decay;
pub mod decayer;
pub mod error;
pub mod executor;
pub mod gateway;
pub mod harness;
pub mod manager;
pub mod model;
pub mod prompts;
pub mod recognizer;
pub mod store;
pub mod text;

pub use activator::{Candidate, CurationPlan, QueryDag};
pub use decay::{retention, stability, DecayParams, RetentionScore};
pub use decayer::{GateDecision, GateReason};
pub use error::{Error, Result};
pub use executor::{Clock, ManualClock, Phase, Session, SystemClock, TurnReport};
pub use gateway::{Gateway, GatewayError, OfflineModel, Role, Script, ScriptedTransport, Transport};
pub use model::{
    new_session, AblationMode, Cluster, ClusterId, EngineConfig, EpisodicMemory, Level, LevelSet, MemoryId,
    MemoryRecord, MemoryType, SemanticMemory, Speaker, TurnIndex, UsageStats, WorkingMemory,
};
pub use store::{Embedder, HashEmbedder, Store, StoredRecord};
