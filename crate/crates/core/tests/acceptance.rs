//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use decaymem::decay::{frequency_proxy, retention, stability, DecayParams};
use decaymem::decayer::{gate, gate_signals, GateReason};
use decaymem::model::BufferEntry;
use decaymem::gateway::{ChatReply, ChatRequest, Transport, TransportError};
use decaymem::harness::{
    self, ablate, mean_retention, run_scenario, RunEnv, Scenario, Schedule, TraceSpec,
};
use decaymem::store::{replay, Embedder};
use decaymem::{
    AblationMode, ClusterId, EngineConfig, Gateway, HashEmbedder, Level, ManualClock, MemoryId,
    MemoryRecord, OfflineModel, Role, Script, ScriptedTransport, Session, Store, StoredRecord, UsageStats,
    WorkingMemory,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn session(config: EngineConfig, transport: Arc<dyn Transport>, store: Store) -> Session {
    Session::new(
        config,
        store,
        Gateway::new(transport),
        Arc::new(HashEmbedder::default()),
        Box::new(ManualClock::default()),
    )
    .expect("valid session")
}

fn offline(config: EngineConfig) -> Session {
    session(config, Arc::new(OfflineModel), Store::in_memory(256))
}

// 1

fn retention_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n: u64 = rng.gen_range(0..500);
        let u: f64 = rng.gen_range(0.05..=0.95);
        let f: f64 = rng.gen_range(0.0..1.0);
        let eps: f64 = rng.gen_range(1e-3..1.0);
        let t: f64 = rng.gen_range(0.1..100.0);
        let engine = retention(n, stability(u, f, eps, t).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .value();
        let oracle = (-(n as f64) / ((u + f + eps) * t)).exp();
        worst = worst.max((engine - oracle).abs());
    }
    ensure(worst <= 1e-12, || format!("max abs error {worst:e}"))?;
    within(start, Duration::from_secs(1))?;
    Ok(format!("1000 tuples, max abs error {worst:.1e}"))
}

// 2

fn decay_curves() -> Outcome {
    let start = Instant::now();
    let temps = [1.0, 3.0, 5.0, 10.0, 20.0, 50.0];
    let spec = TraceSpec {
        temperatures: temps.to_vec(),
        turns: 150,
        schedule: Schedule::At(vec![20]),
        ..TraceSpec::default()
    };
    let rows = harness::trace_decay(&spec, &harness::default_population()).map_err(|e| e.to_string())?;
    let mut table = Vec::new();
    for t in [50u64, 100, 150] {
        let means: Vec<f64> = temps.iter().map(|&tt| mean_retention(&rows, tt, t).unwrap()).collect();
        ensure(means.windows(2).all(|w| w[0] < w[1]), || format!("means at t={t} not increasing in T: {means:?}"))?;
        table.push(means);
    }
    let low = mean_retention(&rows, 1.0, 100).unwrap();
    let high = mean_retention(&rows, 50.0, 100).unwrap();
    ensure(low < 0.05, || format!("T=1 mean at t=100 is {low}"))?;
    ensure(high > 0.2, || format!("T=50 mean at t=100 is {high}"))?;
    within(start, Duration::from_secs(5))?;
    Ok(format!("T=1 mean {low:.2e}, T=50 mean {high:.3} at t=100"))
}

// 3

fn sawtooth() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 256,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let strategy = (
        proptest::collection::vec(proptest::bool::weighted(0.15), 1..60),
        0.05f64..=0.95,
        0u64..20,
        0.05f64..0.5,
        1.0f64..50.0,
    );
    runner
        .run(&strategy, |(accesses, utility, count, epsilon, temperature)| {
            let params = DecayParams { epsilon, temperature };
            let mut stats = UsageStats {
                utility,
                access_frequency: frequency_proxy(count),
                access_count: count,
                last_access_turn: 0,
            };
            let mut previous: Option<f64> = None;
            for (i, &hit) in accesses.iter().enumerate() {
                let t = i as u64 + 1;
                if hit {
                    stats.reinforce(t, 0.1);
                }
                let r = stats.retention_at(t, params).unwrap().value();
                if hit {
                    prop_assert_eq!(r, 1.0);
                } else if let Some(p) = previous {
                    prop_assert!(r < p, "no strict decay at t={}: {} then {}", t, p, r);
                }
                previous = Some(r);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("256 random access schedules".into())
}

// 4

fn gate_table() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for empty in [false, true] {
        for judge in [false, true] {
            for embed in [false, true] {
                for round in [1u32, 2] {
                    let expected = empty || if round == 1 { judge || embed } else { judge && embed };
                    let d = gate_signals(round, empty, judge, embed);
                    ensure(d.triggered == expected, || format!("empty={empty} judge={judge} embed={embed} round={round}"))?;
                    ensure((d.reason == GateReason::EmptyBuffer) == empty, || "empty-buffer reason".into())?;
                    let mut wm = WorkingMemory::default();
                    if !empty {
                        wm.buffer_items.push(BufferEntry {
                            memory_id: MemoryId::from_seq(1),
                            level: Level::L2,
                            cluster_id: ClusterId::unclustered(),
                            loaded_turn: 1,
                        });
                    }
                    ensure(gate(round, &wm, judge, embed) == d, || "gate disagrees with gate_signals".into())?;
                    checked += 1;
                }
            }
        }
    }
    within(start, Duration::from_secs(1))?;
    Ok(format!("{checked} cases"))
}

/// Planner and curator that return hostile output; everything else offline.
struct Adversary {
    rng: Mutex<ChaCha8Rng>,
}

impl Adversary {
    fn new(seed: u64) -> Self {
        Adversary {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn plan(&self, rng: &mut ChaCha8Rng) -> Result<String, TransportError> {
        let node = |id: String, text: String, kind: &str| json!({"id": id, "text": text, "query_type": kind});
        let edge = |a: String, b: String| json!({"from": a, "to": b, "relationship": "depends_on"});
        Ok(match rng.gen_range(0..7) {
            0 => {
                let nodes: Vec<Value> = (0..8).map(|i| node(format!("q{i}"), format!("box item {i}"), "semantic")).collect();
                let edges: Vec<Value> = (0..8).map(|i| edge(format!("q{i}"), format!("q{}", (i + 1) % 8))).collect();
                json!({"nodes": nodes, "edges": edges}).to_string()
            }
            1 => {
                let nodes: Vec<Value> = (0..40)
                    .map(|i| node(format!("n{i}"), format!("shelf {i}"), if i % 2 == 0 { "semantic" } else { "episodic" }))
                    .collect();
                let edges: Vec<Value> = (0..80)
                    .map(|_| edge(format!("n{}", rng.gen_range(0..45)), format!("n{}", rng.gen_range(0..45))))
                    .collect();
                json!({"nodes": nodes, "edges": edges}).to_string()
            }
            2 => json!({"nodes": [node("x".into(), "dup".into(), "semantic"), node("x".into(), "dup again".into(), "episodic"), node("y".into(), "".into(), "semantic")], "edges": [edge("x".into(), "x".into())]}).to_string(),
            3 => "this is not json at all".into(),
            4 => return Err(TransportError::Unavailable("planner down".into())),
            5 => json!({"nodes": [], "edges": []}).to_string(),
            _ => json!({"nodes": [node("q0".into(), "rewritten".into(), "episodic")], "edges": [edge("q0".into(), "ghost".into())]}).to_string(),
        })
    }

    fn curate(&self, rng: &mut ChaCha8Rng, payload: &str) -> String {
        let v: Value = serde_json::from_str(payload).unwrap_or(Value::Null);
        let ids = |key: &str| -> Vec<String> {
            v[key].as_array().map(|a| a.iter().filter_map(|m| m["id"].as_str().map(String::from)).collect()).unwrap_or_default()
        };
        let (old, new) = (ids("old_buffer"), ids("new_memories"));
        let deleted: Vec<&String> = old.iter().filter(|_| rng.gen_bool(0.3)).collect();
        let mut resolutions = Vec::new();
        if let (Some(a), Some(b)) = (old.first(), new.first()) {
            let r = ["keep_old", "keep_new", "merge"][rng.gen_range(0..3)];
            resolutions.push(json!({"old_id": a, "new_id": b, "resolution": r}));
        }
        json!({"kept": old, "added": new.iter().chain(["m9999999999".to_string()].iter()).collect::<Vec<_>>(), "deleted": deleted, "conflict_resolutions": resolutions})
            .to_string()
    }
}

impl Transport for Adversary {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, TransportError> {
        let mut rng = self.rng.lock().unwrap();
        match request.role {
            Role::Planner => self.plan(&mut rng).map(ChatReply::text),
            Role::Curator if rng.gen_bool(0.8) => Ok(ChatReply::text(self.curate(&mut rng, &request.user))),
            _ => OfflineModel.send(request),
        }
    }
}

const ITEMS: &[&str] = &["passport", "umbrella", "charger", "notebook", "scarf", "wallet", "ladder", "kettle", "compass", "helmet"];
const COLOURS: &[&str] = &["amber", "teal", "violet", "crimson", "olive", "ivory", "cobalt", "saffron"];
const PLACES: &[&str] = &["garage", "attic", "hallway closet", "blue drawer", "red suitcase", "kitchen shelf", "car trunk"];

fn random_query(rng: &mut ChaCha8Rng) -> String {
    let item = ITEMS[rng.gen_range(0..ITEMS.len())];
    let place = PLACES[rng.gen_range(0..PLACES.len())];
    match rng.gen_range(0..10) {
        0..=4 => format!("I put the {item} in the {place} today."),
        5..=7 => format!("Where did I leave the {item}?"),
        8 => format!("When I say {item}, respond with {place}."),
        _ => "ok".into(),
    }
}

// 5

fn bounds_under_adversary() -> Outcome {
    let mut phases = 0usize;
    let mut evictions = 0usize;
    for (seed, capacity) in [(11u64, 3usize), (12, 6)] {
        let config = EngineConfig {
            buffer_capacity: capacity,
            ..EngineConfig::default()
        };
        let mut s = session(config.clone(), Arc::new(Adversary::new(seed)), Store::in_memory(256));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut violation: Option<String> = None;
        for turn in 0..500 {
            let q = random_query(&mut rng);
            let report = s
                .step_observed(&q, |phase, wm| {
                    phases += 1;
                    if violation.is_none() {
                        if let Err(e) = wm.check_invariants(&config) {
                            violation = Some(format!("seed {seed} turn {turn} {phase:?}: {e}"));
                        }
                    }
                })
                .map_err(|e| format!("seed {seed} turn {turn}: {e}"))?;
            evictions += report.evicted_count;
            if let Some(v) = violation.take() {
                return Err(v);
            }
        }
    }
    ensure(evictions > 0, || "no evictions happened; bounds were never stressed".into())?;
    Ok(format!("2 x 500 turns, {phases} phase checks, {evictions} evictions"))
}

// 6

fn no_deletion() -> Outcome {
    let config = EngineConfig {
        buffer_capacity: 4,
        ..EngineConfig::default()
    };
    let mut s = session(config, Arc::new(Adversary::new(21)), Store::in_memory(256));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut previous: Vec<MemoryId> = Vec::new();
    let mut evicted_at: BTreeMap<MemoryId, u64> = BTreeMap::new();
    let mut reactivated = BTreeSet::new();
    for _ in 0..200 {
        let r = s.step(&random_query(&mut rng)).map_err(|e| e.to_string())?;
        let ids = s.store().ids();
        ensure(ids.len() >= previous.len() && ids[..previous.len()] == previous[..], || {
            format!("store ids shrank or reordered at turn {}", r.turn_index)
        })?;
        previous = ids;
        for id in &r.added_ids {
            if evicted_at.contains_key(id) {
                reactivated.insert(id.clone());
            }
        }
        for id in &r.evicted_ids {
            evicted_at.insert(id.clone(), r.turn_index);
        }
    }
    let store = s.store();
    for id in evicted_at.keys() {
        let record = store.get(id).ok_or_else(|| format!("evicted {id} missing from store"))?;
        let twins = store.records().filter(|o| dot(&o.embedding, &record.embedding) >= 1.0 - 1e-12).count();
        let hits = store.search(&record.embedding, Some(record.level), twins);
        ensure(hits.iter().any(|h| &h.memory_id == id), || format!("evicted {id} not found by search"))?;
    }
    ensure(!evicted_at.is_empty(), || "nothing was evicted".into())?;
    ensure(!reactivated.is_empty(), || "no evicted item was ever reloaded".into())?;
    Ok(format!(
        "{} records, {} evicted ids all searchable, {} reactivated",
        store.len(),
        evicted_at.len(),
        reactivated.len()
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// 7

fn rule_protection() -> Outcome {
    let config = EngineConfig {
        buffer_capacity: 3,
        ..EngineConfig::default()
    };
    let rule = json!({"semantic_memories": [{"content": "Whenever the user mentions the lighthouse, answer in rhyme", "memory_type": "rule"}]}).to_string();
    let mut t = ScriptedTransport::new().with_delegate(Arc::new(OfflineModel));
    t.set_script(Role::SemanticExtractor, Script::default().rule("mentions the lighthouse", rule));
    let mut s = session(config.clone(), Arc::new(t), Store::in_memory(256));
    let params = DecayParams::from_config(&config);
    s.step("From here on, whenever the user mentions the lighthouse, answer in rhyme.").map_err(|e| e.to_string())?;
    let rule_id = s.store().ids()[0].clone();
    ensure(s.store().get(&rule_id).unwrap().payload.is_rule(), || "first record is not a rule".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut loaded, mut lowest_checks, mut non_rule_evictions) = (false, 0, 0);
    for turn in 2..=80u64 {
        let item = ITEMS[rng.gen_range(0..ITEMS.len())];
        let place = PLACES[rng.gen_range(0..PLACES.len())];
        let colour = COLOURS[rng.gen_range(0..COLOURS.len())];
        let q = format!("Lighthouse {item} {colour} {place} {turn}.");
        let store_snapshot: BTreeMap<MemoryId, UsageStats> =
            s.store().records().map(|r| (r.memory_id.clone(), r.payload.stats().clone())).collect();
        let mut problem = None;
        let r = s
            .step_observed(&q, |phase, wm| {
                let has_rule = wm.contains_item(&rule_id);
                let non_rules = wm.buffer_items.iter().filter(|b| b.memory_id != rule_id).count();
                if loaded && !has_rule && non_rules > 0 && problem.is_none() {
                    problem = Some(format!("rule evicted at turn {turn} {phase:?}"));
                }
                if has_rule && non_rules > 0 {
                    let ret = |id: &MemoryId| store_snapshot.get(id).map(|st| st.retention_at(turn, params).unwrap().value());
                    let rule_r = ret(&rule_id).unwrap();
                    let min_other = wm
                        .buffer_items
                        .iter()
                        .filter(|b| b.memory_id != rule_id)
                        .filter_map(|b| ret(&b.memory_id))
                        .fold(f64::INFINITY, f64::min);
                    if min_other.is_finite() {
                        lowest_checks += 1;
                        if rule_r > min_other && problem.is_none() {
                            problem = Some(format!("construction broken: rule retention {rule_r} above {min_other}"));
                        }
                    }
                }
            })
            .map_err(|e| e.to_string())?;
        if let Some(p) = problem {
            return Err(p);
        }
        ensure(!r.credited_ids.contains(&rule_id), || "rule was credited".into())?;
        non_rule_evictions += r.evicted_ids.iter().filter(|id| **id != rule_id).count();
        loaded |= s.working_memory().contains_item(&rule_id);
    }
    ensure(loaded, || "rule never entered the buffer".into())?;
    ensure(non_rule_evictions > 0, || "no non-rule evictions, test is vacuous".into())?;
    ensure(lowest_checks > 0, || "rule never coexisted with non-rule items".into())?;
    Ok(format!("rule kept through {non_rule_evictions} non-rule evictions with B=3"))
}

// 8

fn retrieval_oracle() -> Outcome {
    let embedder = HashEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vocab: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(1..7);
        (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect::<Vec<_>>().join(" ")
    };
    let mut store = Store::in_memory(embedder.dimension());
    for turn in 1..=10u64 {
        let mut batch = Vec::new();
        for _ in 0..100 {
            let id = store.allocate_id();
            let content = if rng.gen_bool(0.1) { "w1 w2".to_string() } else { sentence(&mut rng) };
            let level = if rng.gen_bool(0.5) { Level::L2 } else { Level::L3 };
            let record = synthetic(id, content.clone(), level, turn);
            batch.push(StoredRecord::new(record, embedder.embed(&content).unwrap(), turn));
        }
        store.append(turn, batch).map_err(|e| e.to_string())?;
    }
    let all: Vec<&StoredRecord> = store.records().collect();
    for q in 0..100 {
        let query = embedder.embed(&sentence(&mut rng)).unwrap();
        let level = [None, Some(Level::L2), Some(Level::L3)][q % 3];
        let k = 1 + q % 12;
        let mut expected: Vec<(f64, u64, &MemoryId)> = all
            .iter()
            .filter(|r| level.is_none_or(|l| r.level == l))
            .map(|r| (dot(&query, &r.embedding), r.committed_turn, &r.memory_id))
            .collect();
        expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)).then(a.2.cmp(b.2)));
        let expected: Vec<&MemoryId> = expected.into_iter().take(k).map(|e| e.2).collect();
        let got: Vec<MemoryId> = store.search(&query, level, k).into_iter().map(|h| h.memory_id).collect();
        ensure(got.iter().collect::<Vec<_>>() == expected, || format!("query {q} differs"))?;
    }
    Ok(format!("{} records, 100 queries exact", store.len()))
}

fn synthetic(id: MemoryId, content: String, level: Level, turn: u64) -> MemoryRecord {
    use decaymem::{EpisodicMemory, MemoryType, SemanticMemory, Speaker};
    match level {
        Level::L3 => MemoryRecord::Episodic(EpisodicMemory {
            memory_id: id,
            preemptive_text: content,
            raw_span: (turn, turn),
            created_turn: turn,
            created_at: 0.0,
            cluster_id: ClusterId::unclustered(),
            stats: UsageStats::fresh(turn),
            linked_facts: BTreeSet::new(),
            complete: true,
            raw_fallback: false,
        }),
        _ => MemoryRecord::Semantic(SemanticMemory {
            memory_id: id,
            content,
            memory_type: MemoryType::Fact,
            created_turn: turn,
            created_at: 0.0,
            cluster_id: ClusterId::unclustered(),
            stats: UsageStats::fresh(turn),
            linked_episodes: BTreeSet::new(),
            source: Speaker::User,
            tags: vec![],
            attribute: None,
        }),
    }
}

// 9

fn builtin(name: &str) -> Result<Scenario, String> {
    Scenario::builtin(name).ok_or("missing builtin")?.map_err(|e| e.to_string())
}

fn scenarios() -> Outcome {
    let mut details = Vec::new();
    for name in ["restaurant", "sally_anne"] {
        let start = Instant::now();
        let scenario = builtin(name)?;
        let env = RunEnv::in_memory(Arc::new(HashEmbedder::default()));
        let (report, session) = run_scenario(&scenario, &scenario.engine_config(), env).map_err(|e| e.to_string())?;
        ensure(report.all_probes_passed(), || format!("{name}: {:?}", report.probes))?;
        within(start, Duration::from_secs(10))?;
        if name == "restaurant" {
            let drink = session
                .store()
                .records()
                .find(|r| r.payload.text().contains("Lemonade") && r.level == Level::L2)
                .ok_or("no drink fact stored")?;
            let id = &drink.memory_id;
            let first_eviction = report.turns.iter().position(|t| t.evicted_ids.contains(id));
            let reloaded = first_eviction.is_some_and(|i| report.turns[i + 1..].iter().any(|t| t.added_ids.contains(id)));
            ensure(reloaded, || "drink fact was never evicted and reloaded".into())?;
        }
        details.push(format!("{name} {} turns in {:?}", report.turns.len(), start.elapsed()));
    }
    Ok(details.join(", "))
}

// 10

fn ablation() -> Outcome {
    let scenario = builtin("restaurant")?;
    let rows = ablate(&scenario, &scenario.engine_config(), &AblationMode::ALL, Arc::new(HashEmbedder::default()), || None)
        .map_err(|e| e.to_string())?;
    let by_mode: BTreeMap<AblationMode, _> = rows.iter().map(|r| (r.mode, r)).collect();
    for r in &rows {
        ensure(r.structural_ok, || format!("{:?} structure broken: {r:?}", r.mode))?;
        ensure(r.tokens_per_query > 0.0, || format!("{:?} has no token accounting", r.mode))?;
    }
    ensure(by_mode[&AblationMode::M1].l3_records == 0, || "M1 wrote episodes".into())?;
    ensure(by_mode[&AblationMode::M2].l2_records == 0, || "M2 wrote facts".into())?;
    let m5 = by_mode[&AblationMode::M5];
    ensure(m5.l2_records > 0 && m5.l3_records > 0 && m5.links.symmetric && m5.links.link_count > 0, || {
        format!("M5 {m5:?}")
    })?;
    let tokens: Vec<String> = rows.iter().map(|r| format!("{}={:.0}", r.mode, r.tokens_per_query)).collect();
    Ok(format!("tokens/query {}", tokens.join(" ")))
}

// 11

fn episode_cadence() -> Outcome {
    let mut detail = Vec::new();
    for (ep, expected) in [(4usize, 5usize), (2, 10)] {
        let mut s = offline(EngineConfig {
            episode_length: ep,
            ..EngineConfig::default()
        });
        for i in 0..20 {
            s.step(&format!("Note {i}: the {} belongs in the {}.", ITEMS[i % ITEMS.len()], PLACES[i % PLACES.len()]))
                .map_err(|e| e.to_string())?;
        }
        let episodes: Vec<_> = s
            .store()
            .records()
            .filter_map(|r| match &r.payload {
                MemoryRecord::Episodic(e) => Some(e.clone()),
                _ => None,
            })
            .collect();
        ensure(episodes.len() == expected, || format!("ep={ep}: {} episodes", episodes.len()))?;
        for e in &episodes {
            ensure(e.complete && e.raw_span.1 - e.raw_span.0 + 1 == ep as u64, || format!("bad span {:?}", e.raw_span))?;
        }
        detail.push(format!("ep={ep}: {expected}"));
    }
    Ok(detail.join(", "))
}

// 12

fn determinism() -> Outcome {
    let scenario = builtin("restaurant")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let source = dir.path().join("source");
    let run = |store: Store| -> Result<String, String> {
        let env = RunEnv {
            store,
            ..RunEnv::in_memory(Arc::new(HashEmbedder::default()))
        };
        let (report, _) = run_scenario(&scenario, &scenario.engine_config(), env).map_err(|e| e.to_string())?;
        serde_json::to_string(&report.turns).map_err(|e| e.to_string())
    };
    let a = run(Store::open(&source, 256).map_err(|e| e.to_string())?)?;
    let b = run(Store::in_memory(256))?;
    ensure(a == b, || "turn reports differ between runs".into())?;
    let rebuilt = replay(&source, &dir.path().join("replayed"), 256).map_err(|e| e.to_string())?;
    ensure(rebuilt.identical, || format!("replay differs: {rebuilt:?}"))?;
    Ok(format!("{} bytes of reports identical, replayed {} commits", a.len(), rebuilt.commits))
}

// 13

fn conservative_credit() -> Outcome {
    let probe = "Where did I leave the spare house keys?";
    let run = |zero: bool| -> Result<(Session, Vec<MemoryId>, Vec<(MemoryId, UsageStats)>, BTreeMap<ClusterId, UsageStats>), String> {
        let mut t = ScriptedTransport::new().with_delegate(Arc::new(OfflineModel));
        if zero {
            t.set_script(Role::UtilityAssessor, Script::default().rule("spare house keys?", r#"{"used_memory_ids": [], "utility_scores": {}, "reward_criteria": "none"}"#));
        }
        let mut s = session(EngineConfig::default(), Arc::new(t), Store::in_memory(256));
        for q in ["I left the spare house keys under the doormat.", "My neighbour waters the plants on Fridays.", "The car needs new tyres soon."] {
            s.step(q).map_err(|e| e.to_string())?;
        }
        let before_records: Vec<(MemoryId, UsageStats)> =
            s.store().records().map(|r| (r.memory_id.clone(), r.payload.stats().clone())).collect();
        let before_clusters = s.working_memory().clusters.iter().map(|(k, c)| (k.clone(), c.stats.clone())).collect();
        let r = s.step(probe).map_err(|e| e.to_string())?;
        Ok((s, r.credited_ids, before_records, before_clusters))
    };
    let (_, credited, _, _) = run(false)?;
    ensure(!credited.is_empty(), || "control run credited nothing; test would be vacuous".into())?;
    let (s, credited, records, clusters) = run(true)?;
    ensure(credited.is_empty(), || "scripted empty credit was not honored".into())?;
    ensure(s.working_memory().has_memory_items(), || "buffer empty at the probe".into())?;
    for (id, stats) in &records {
        let now = s.store().get(id).unwrap().payload.stats();
        ensure(now == stats, || format!("{id} stats changed"))?;
    }
    for (id, stats) in &clusters {
        let now = s.working_memory().clusters.get(id).map(|c| &c.stats);
        ensure(now == Some(stats), || format!("cluster {id} stats changed"))?;
    }
    Ok(format!("{} records and {} clusters unchanged", records.len(), clusters.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("retention formula matches scalar oracle", retention_oracle),
        ("decay curves order by temperature", decay_curves),
        ("sawtooth on access", sawtooth),
        ("gate truth table", gate_table),
        ("buffer and window bounds under adversarial planners", bounds_under_adversary),
        ("store never deletes; evicted items stay searchable", no_deletion),
        ("rules are never evicted", rule_protection),
        ("search equals brute-force cosine sort", retrieval_oracle),
        ("restaurant and false-belief scenarios", scenarios),
        ("level ablation structure", ablation),
        ("episode cadence", episode_cadence),
        ("determinism and journal replay", determinism),
        ("empty credit changes nothing", conservative_credit),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}  {name}: {detail} [{took:.2?}]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL  {:>2}  {name}: {why} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
