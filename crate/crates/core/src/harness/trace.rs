//! Offline retention traces over a synthetic population, one row per
//! (temperature, turn, entity).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decay::{frequency_proxy, DecayParams};
use crate::error::Result;
use crate::model::{Level, TurnIndex, UsageStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntity {
    pub id: String,
    pub level: Level,
    pub utility: f64,
    pub prior_count: u64,
}

/// 40 entities with utility spread evenly over [0.05, 0.95] and prior access
/// counts cycling through 0..10.
pub fn default_population() -> Vec<TraceEntity> {
    (0..40u64)
        .map(|i| TraceEntity {
            id: format!("e{i:02}"),
            level: if i % 2 == 0 { Level::L2 } else { Level::L3 },
            utility: 0.05 + 0.9 * i as f64 / 39.0,
            prior_count: i % 10,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Never,
    At(Vec<TurnIndex>),
    Every(TurnIndex),
}

impl Schedule {
    pub fn hits(&self, t: TurnIndex) -> bool {
        match self {
            Schedule::Never => false,
            Schedule::At(turns) => turns.contains(&t),
            Schedule::Every(k) => *k > 0 && t % k == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub t: TurnIndex,
    pub entity_id: String,
    pub level: Level,
    pub retention: f64,
    pub n: u64,
    pub utility: f64,
    pub access_frequency: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSpec {
    pub temperatures: Vec<f64>,
    pub turns: TurnIndex,
    pub schedule: Schedule,
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            temperatures: vec![1.0, 5.0, 10.0, 20.0, 50.0],
            turns: 100,
            schedule: Schedule::Never,
            epsilon: 0.1,
            delta: 0.1,
        }
    }
}

/// Every entity starts accessed at turn 0. Scheduled reinforcement applies
/// to all entities before the turn's row is recorded.
pub fn trace_decay(spec: &TraceSpec, population: &[TraceEntity]) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::with_capacity(spec.temperatures.len() * spec.turns as usize * population.len());
    for &temperature in &spec.temperatures {
        let params = DecayParams {
            epsilon: spec.epsilon,
            temperature,
        };
        let mut stats: Vec<UsageStats> = population
            .iter()
            .map(|e| UsageStats {
                utility: e.utility,
                access_frequency: frequency_proxy(e.prior_count),
                access_count: e.prior_count,
                last_access_turn: 0,
            })
            .collect();
        for t in 1..=spec.turns {
            let hit = spec.schedule.hits(t);
            for (entity, s) in population.iter().zip(stats.iter_mut()) {
                if hit {
                    s.reinforce(t, spec.delta);
                }
                rows.push(TraceRow {
                    temperature,
                    t,
                    entity_id: entity.id.clone(),
                    level: entity.level,
                    retention: s.retention_at(t, params)?.value(),
                    n: s.turns_since_access(t),
                    utility: s.utility,
                    access_frequency: s.access_frequency,
                    epsilon: spec.epsilon,
                });
            }
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "T,t,entity_id,level,retention,n,utility,access_frequency,epsilon";

pub fn write_csv(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:?},{},{},{},{},{}",
            r.temperature, r.t, r.entity_id, r.level, r.retention, r.n, r.utility, r.access_frequency, r.epsilon
        )?;
    }
    Ok(())
}

/// Mean retention over the population at (`temperature`, `t`).
pub fn mean_retention(rows: &[TraceRow], temperature: f64, t: TurnIndex) -> Option<f64> {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.temperature == temperature && r.t == t)
        .map(|r| r.retention)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}
