//! Interaction-based forgetting curve.
//!
//! Retention of an entity is `exp(-n / S)` where `n` counts turns since its
//! last access and `S = (utility + access_frequency + epsilon) * temperature`.
//! Decay is lazy: nothing is mutated as turns pass, retention is recomputed
//! from `last_access_turn` whenever it is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cluster, EngineConfig, MemoryRecord, TurnIndex, UsageStats};

pub const UTILITY_MIN: f64 = 0.05;
pub const UTILITY_MAX: f64 = 0.95;

/// Count at which the access-frequency proxy reaches one half.
const FREQUENCY_HALF_SATURATION: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RetentionScore(f64);

impl RetentionScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayParams {
    pub epsilon: f64,
    pub temperature: f64,
}

impl DecayParams {
    pub fn from_config(config: &EngineConfig) -> Self {
        DecayParams {
            epsilon: config.epsilon,
            temperature: config.decay_temperature,
        }
    }
}

pub fn stability(utility: f64, access_frequency: f64, epsilon: f64, temperature: f64) -> Result<f64> {
    for (name, v) in [
        ("utility", utility),
        ("access_frequency", access_frequency),
        ("epsilon", epsilon),
        ("temperature", temperature),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite ({v})")));
        }
    }
    if !(0.0..=1.0).contains(&utility) || !(0.0..=1.0).contains(&access_frequency) {
        return Err(Error::Numeric(format!(
            "utility {utility} and access_frequency {access_frequency} must lie in [0, 1]"
        )));
    }
    if epsilon <= 0.0 || temperature <= 0.0 {
        return Err(Error::Numeric(format!(
            "epsilon {epsilon} and temperature {temperature} must be > 0"
        )));
    }
    Ok((utility + access_frequency + epsilon) * temperature)
}

pub fn retention(turns_since_access: u64, stability: f64) -> Result<RetentionScore> {
    if !(stability.is_finite() && stability > 0.0) {
        return Err(Error::Numeric(format!("stability must be finite and > 0, got {stability}")));
    }
    Ok(RetentionScore((-(turns_since_access as f64) / stability).exp()))
}

/// Maps an access count into [0, 1): `count / (count + 5)`.
pub fn frequency_proxy(access_count: u64) -> f64 {
    let c = access_count as f64;
    c / (c + FREQUENCY_HALF_SATURATION)
}

pub fn clamp_score(score: f64) -> f64 {
    score.clamp(UTILITY_MIN, UTILITY_MAX)
}

impl UsageStats {
    pub fn stability(&self, params: DecayParams) -> Result<f64> {
        stability(self.utility, self.access_frequency, params.epsilon, params.temperature)
    }

    pub fn turns_since_access(&self, current_turn: TurnIndex) -> u64 {
        current_turn.saturating_sub(self.last_access_turn)
    }

    pub fn retention_at(&self, current_turn: TurnIndex, params: DecayParams) -> Result<RetentionScore> {
        retention(self.turns_since_access(current_turn), self.stability(params)?)
    }

    /// Record an access: reset the decay clock, bump the count, raise utility.
    pub fn reinforce(&mut self, current_turn: TurnIndex, delta: f64) {
        debug_assert!(delta > 0.0);
        self.last_access_turn = self.last_access_turn.max(current_turn);
        self.access_count += 1;
        self.access_frequency = frequency_proxy(self.access_count);
        self.utility = (self.utility + delta).min(UTILITY_MAX);
    }
}

/// Anything whose accessibility decays.
pub trait Decaying {
    fn usage(&self) -> &UsageStats;
    fn usage_mut(&mut self) -> &mut UsageStats;
    fn entity_id(&self) -> &str;
}

impl Decaying for Cluster {
    fn usage(&self) -> &UsageStats {
        &self.stats
    }
    fn usage_mut(&mut self) -> &mut UsageStats {
        &mut self.stats
    }
    fn entity_id(&self) -> &str {
        self.cluster_id.as_str()
    }
}

impl Decaying for MemoryRecord {
    fn usage(&self) -> &UsageStats {
        self.stats()
    }
    fn usage_mut(&mut self) -> &mut UsageStats {
        self.stats_mut()
    }
    fn entity_id(&self) -> &str {
        self.id().as_str()
    }
}

pub fn reinforce<T: Decaying + ?Sized>(target: &mut T, current_turn: TurnIndex, delta: f64) {
    target.usage_mut().reinforce(current_turn, delta);
}

/// Re-evaluates retention for every target at `current_turn`. Nothing is mutated.
pub fn decay_step<'a, T, I>(targets: I, current_turn: TurnIndex, params: DecayParams) -> Result<Vec<(String, RetentionScore)>>
where
    T: Decaying + 'a + ?Sized,
    I: IntoIterator<Item = &'a T>,
{
    targets
        .into_iter()
        .map(|t| Ok((t.entity_id().to_string(), t.usage().retention_at(current_turn, params)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClusterId;
    use proptest::prelude::*;

    // Independent scalar oracle.
    fn oracle(n: f64, u: f64, f: f64, eps: f64, t: f64) -> f64 {
        let s = t * eps + t * f + t * u;
        1.0 / (n / s).exp()
    }

    #[test]
    fn stability_examples() {
        assert!((stability(0.4, 0.5, 0.1, 10.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((stability(0.0, 0.0, 0.1, 1.0).unwrap() - 0.1).abs() < 1e-15);
        // 2.0 * 50 evaluated independently.
        let expected = oracle(0.0, 0.95, 0.95, 0.1, 50.0);
        assert_eq!(expected, 1.0);
        assert!((stability(0.95, 0.95, 0.1, 50.0).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn stability_rejects_non_finite() {
        assert!(matches!(stability(f64::NAN, 0.0, 0.1, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(stability(0.1, 0.0, 0.1, f64::INFINITY), Err(Error::Numeric(_))));
        assert!(matches!(stability(0.1, 0.0, 0.0, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn retention_examples() {
        assert_eq!(retention(0, 3.7).unwrap().value(), 1.0);
        // e^-1 and e^-0.5 from the oracle
        assert!((retention(10, 10.0).unwrap().value() - 0.367_879_441_171_442_3).abs() < 1e-12);
        assert!((retention(5, 10.0).unwrap().value() - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert!((retention(10, 10.0).unwrap().value() - oracle(10.0, 0.4, 0.5, 0.1, 10.0)).abs() < 1e-12);
    }

    #[test]
    fn retention_rejects_non_positive_stability() {
        assert!(retention(1, 0.0).is_err());
        assert!(retention(1, -2.0).is_err());
        assert!(retention(1, f64::NAN).is_err());
    }

    #[test]
    fn reinforce_examples() {
        let params = DecayParams { epsilon: 0.1, temperature: 10.0 };
        let mut c = Cluster::new(ClusterId::from_seq(1), "x", "y", 0);
        reinforce(&mut c, 7, 0.1);
        assert!((c.stats.utility - 0.6).abs() < 1e-12);
        assert_eq!(c.stats.retention_at(7, params).unwrap().value(), 1.0);
        assert_eq!(c.stats.access_count, 1);
        assert!((c.stats.access_frequency - 1.0 / 6.0).abs() < 1e-12);

        c.stats.utility = 0.9;
        reinforce(&mut c, 8, 0.1);
        assert_eq!(c.stats.utility, 0.95);
    }

    #[test]
    fn decay_step_is_lazy() {
        let params = DecayParams { epsilon: 0.1, temperature: 10.0 };
        let mut a = Cluster::new(ClusterId::from_seq(1), "a", "", 10);
        a.stats.utility = 0.4;
        a.stats.access_frequency = 0.5;
        let b = a.clone();
        let before = a.clone();
        let view = decay_step([&a], 20, params).unwrap();
        assert_eq!(a, before);
        assert!((view[0].1.value() - (-1.0f64).exp()).abs() < 1e-12);

        a.stats.last_access_turn = 20;
        let view = decay_step([&a, &b], 20, params).unwrap();
        assert_eq!(view[0].1.value(), 1.0);
        assert!(view[0].1 > view[1].1);
    }

    proptest! {
        #[test]
        fn monotone_decay(n in 0u64..10_000, s in 0.01f64..1000.0) {
            let now = retention(n, s).unwrap();
            let next = retention(n + 1, s).unwrap();
            prop_assert!(next < now || now.value() == 0.0);
        }

        #[test]
        fn retention_increases_with_temperature(
            n in 1u64..200, u in 0.0f64..1.0, f in 0.0f64..1.0, t in 0.1f64..100.0, dt in 0.1f64..50.0
        ) {
            let low = retention(n, stability(u, f, 0.1, t).unwrap()).unwrap();
            let high = retention(n, stability(u, f, 0.1, t + dt).unwrap()).unwrap();
            prop_assert!(high > low);
        }

        #[test]
        fn utility_stays_clamped(start in 0.05f64..0.95, steps in 1usize..50, delta in 0.001f64..1.0) {
            let mut stats = UsageStats { utility: start, ..UsageStats::fresh(0) };
            for t in 0..steps {
                stats.reinforce(t as u64, delta);
                prop_assert!((UTILITY_MIN..=UTILITY_MAX).contains(&stats.utility));
            }
        }

        #[test]
        fn matches_oracle(n in 0u64..500, u in 0.0f64..=1.0, f in 0.0f64..=1.0, eps in 0.001f64..1.0, t in 0.1f64..100.0) {
            let got = retention(n, stability(u, f, eps, t).unwrap()).unwrap().value();
            prop_assert!((got - oracle(n as f64, u, f, eps, t)).abs() < 1e-12);
        }
    }
}
