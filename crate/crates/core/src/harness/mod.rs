//! Evaluation harness: scripted scenarios, decay traces and layer ablation.

pub mod ablation;
pub mod distractors;
pub mod scenario;
pub mod trace;

pub use ablation::{ablate, AblationRow};
pub use distractors::Distractors;
pub use scenario::{audit_links, evicted_ids, run_scenario, LinkAudit, Probe, ProbeResult, RunEnv, Scenario, ScenarioReport, ScenarioSummary};
pub use trace::{default_population, mean_retention, trace_decay, write_csv, Schedule, TraceEntity, TraceRow, TraceSpec};
