//! Layer ablation: the same scenario under each level combination.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::scenario::{run_scenario, LinkAudit, RunEnv, Scenario};
use crate::error::Result;
use crate::gateway::Transport;
use crate::model::{AblationMode, EngineConfig, LevelSet};
use crate::store::Embedder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub levels: LevelSet,
    pub l2_records: usize,
    pub l3_records: usize,
    pub links: LinkAudit,
    pub tokens_per_query: f64,
    pub solved: usize,
    pub probes: usize,
    /// Disabled levels stayed empty, enabled ones were written, and links
    /// exist (symmetrically) exactly when linking is active.
    pub structural_ok: bool,
}

/// Run `scenario` once per mode, each on a fresh in-memory store and a fresh
/// transport from `transport`.
pub fn ablate(
    scenario: &Scenario,
    base: &EngineConfig,
    modes: &[AblationMode],
    embedder: Arc<dyn Embedder>,
    transport: impl Fn() -> Option<Arc<dyn Transport>>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let config = base.clone().with_mode(mode);
        let mut env = RunEnv::in_memory(embedder.clone());
        env.transport = transport();
        let (report, _) = run_scenario(scenario, &config, env)?;
        let s = report.summary;
        let levels = config.enabled_levels;
        let links_ok = if config.linking_active() {
            s.links.link_count > 0 && s.links.symmetric
        } else {
            s.links.link_count == 0
        };
        rows.push(AblationRow {
            mode,
            levels,
            l2_records: s.l2_records,
            l3_records: s.l3_records,
            tokens_per_query: s.tokens_per_query,
            solved: s.solved,
            probes: s.probes,
            structural_ok: (s.l2_records > 0) == levels.l2 && (s.l3_records > 0) == levels.l3 && links_ok,
            links: s.links,
        });
    }
    Ok(rows)
}
