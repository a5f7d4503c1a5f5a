//! Domain types shared across the engine: memory levels, working memory,
//! configuration and identifiers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TurnIndex = u64;

/// Seconds since an arbitrary epoch. Turn indices drive decay; wall-clock
/// seconds only feed elapsed-time annotations in prompts.
pub type Timestamp = f64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryId(pub String);

impl MemoryId {
    /// Monotone, zero-padded so lexical order equals allocation order.
    pub fn from_seq(seq: u64) -> Self {
        MemoryId(format!("m{seq:010}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MemoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub String);

impl ClusterId {
    pub const UNCLUSTERED: &'static str = "c-unclustered";

    pub fn from_seq(seq: u64) -> Self {
        ClusterId(format!("c{seq:04}"))
    }

    pub fn unclustered() -> Self {
        ClusterId(Self::UNCLUSTERED.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryType {
    Fact,
    Rule,
    Preference,
}

impl MemoryType {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryType::Fact => "fact",
            MemoryType::Rule => "rule",
            MemoryType::Preference => "preference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

/// Usage statistics that govern decay-driven accessibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub utility: f64,
    pub access_frequency: f64,
    pub access_count: u64,
    pub last_access_turn: TurnIndex,
}

impl UsageStats {
    pub const INITIAL_UTILITY: f64 = 0.5;

    pub fn fresh(turn: TurnIndex) -> Self {
        UsageStats {
            utility: Self::INITIAL_UTILITY,
            access_frequency: 0.0,
            access_count: 0,
            last_access_turn: turn,
        }
    }
}

/// L1 topic node; permanently resident in the working buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: ClusterId,
    pub name: String,
    pub summary: String,
    pub procedural: Vec<String>,
    #[serde(flatten)]
    pub stats: UsageStats,
    pub creation_turn: TurnIndex,
}

impl Cluster {
    pub fn new(cluster_id: ClusterId, name: &str, summary: &str, turn: TurnIndex) -> Self {
        Cluster {
            cluster_id,
            name: name.to_string(),
            summary: summary.to_string(),
            procedural: Vec::new(),
            stats: UsageStats::fresh(turn),
            creation_turn: turn,
        }
    }

    /// Text used to embed the cluster for assignment.
    pub fn descriptor(&self) -> String {
        format!("{}: {}", self.name.replace('_', " "), self.summary)
    }
}

/// L2 entry: a discrete, timestamped statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMemory {
    pub memory_id: MemoryId,
    pub content: String,
    pub memory_type: MemoryType,
    pub created_turn: TurnIndex,
    pub created_at: Timestamp,
    pub cluster_id: ClusterId,
    #[serde(flatten)]
    pub stats: UsageStats,
    pub linked_episodes: BTreeSet<MemoryId>,
    pub source: Speaker,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    /// Conflict key: two facts with the same attribute describe the same
    /// piece of state, and the newer one supersedes the older.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

/// L3 entry: a fixed-length interaction episode in preemptive form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    pub memory_id: MemoryId,
    pub preemptive_text: String,
    pub raw_span: (TurnIndex, TurnIndex),
    pub created_turn: TurnIndex,
    pub created_at: Timestamp,
    pub cluster_id: ClusterId,
    #[serde(flatten)]
    pub stats: UsageStats,
    pub linked_facts: BTreeSet<MemoryId>,
    pub complete: bool,
    /// Set when the preemptive rewrite was unavailable and the raw turn text was kept.
    #[serde(default)]
    pub raw_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MemoryRecord {
    Semantic(SemanticMemory),
    Episodic(EpisodicMemory),
}

impl MemoryRecord {
    pub fn id(&self) -> &MemoryId {
        match self {
            MemoryRecord::Semantic(m) => &m.memory_id,
            MemoryRecord::Episodic(e) => &e.memory_id,
        }
    }

    pub fn level(&self) -> Level {
        match self {
            MemoryRecord::Semantic(_) => Level::L2,
            MemoryRecord::Episodic(_) => Level::L3,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            MemoryRecord::Semantic(m) => &m.content,
            MemoryRecord::Episodic(e) => &e.preemptive_text,
        }
    }

    pub fn cluster_id(&self) -> &ClusterId {
        match self {
            MemoryRecord::Semantic(m) => &m.cluster_id,
            MemoryRecord::Episodic(e) => &e.cluster_id,
        }
    }

    pub fn stats(&self) -> &UsageStats {
        match self {
            MemoryRecord::Semantic(m) => &m.stats,
            MemoryRecord::Episodic(e) => &e.stats,
        }
    }

    pub fn stats_mut(&mut self) -> &mut UsageStats {
        match self {
            MemoryRecord::Semantic(m) => &mut m.stats,
            MemoryRecord::Episodic(e) => &mut e.stats,
        }
    }

    pub fn created_turn(&self) -> TurnIndex {
        match self {
            MemoryRecord::Semantic(m) => m.created_turn,
            MemoryRecord::Episodic(e) => e.created_turn,
        }
    }

    pub fn created_at(&self) -> Timestamp {
        match self {
            MemoryRecord::Semantic(m) => m.created_at,
            MemoryRecord::Episodic(e) => e.created_at,
        }
    }

    /// Episodes are rendered as facts; only L2 entries carry a declared type.
    pub fn memory_type(&self) -> MemoryType {
        match self {
            MemoryRecord::Semantic(m) => m.memory_type,
            MemoryRecord::Episodic(_) => MemoryType::Fact,
        }
    }

    pub fn is_rule(&self) -> bool {
        self.memory_type() == MemoryType::Rule
    }

    pub fn links(&self) -> &BTreeSet<MemoryId> {
        match self {
            MemoryRecord::Semantic(m) => &m.linked_episodes,
            MemoryRecord::Episodic(e) => &e.linked_facts,
        }
    }

    pub fn links_mut(&mut self) -> &mut BTreeSet<MemoryId> {
        match self {
            MemoryRecord::Semantic(m) => &mut m.linked_episodes,
            MemoryRecord::Episodic(e) => &mut e.linked_facts,
        }
    }

    pub fn attribute(&self) -> Option<&str> {
        match self {
            MemoryRecord::Semantic(m) => m.attribute.as_deref(),
            MemoryRecord::Episodic(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Message sequence number; strictly increasing within a session.
    pub turn_index: u64,
    pub role: Speaker,
    pub text: String,
    pub timestamp: Timestamp,
}

/// A loaded L2/L3 item in the dynamic part of the buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub memory_id: MemoryId,
    pub level: Level,
    pub cluster_id: ClusterId,
    pub loaded_turn: TurnIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSet {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl LevelSet {
    pub const ALL: LevelSet = LevelSet {
        l1: true,
        l2: true,
        l3: true,
    };

    pub fn contains(&self, level: Level) -> bool {
        match level {
            Level::L1 => self.l1,
            Level::L2 => self.l2,
            Level::L3 => self.l3,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.l1 || self.l2 || self.l3)
    }

    /// Parse a list such as `"L1,L2"` or `"l2+l3"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = LevelSet {
            l1: false,
            l2: false,
            l3: false,
        };
        for part in spec.split([',', '+', ' ']).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "L1" => set.l1 = true,
                "L2" => set.l2 = true,
                "L3" => set.l3 = true,
                other => return Err(Error::Config(format!("unknown memory level {other:?}"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Config("enabled_levels must not be empty".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.l1, "L1"), (self.l2, "L2"), (self.l3, "L3")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join("+"))
    }
}

/// The five layer-ablation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::M1,
        AblationMode::M2,
        AblationMode::M3,
        AblationMode::M4,
        AblationMode::M5,
    ];

    pub fn levels(self) -> LevelSet {
        let (l1, l2, l3) = match self {
            AblationMode::M1 => (false, true, false),
            AblationMode::M2 => (false, false, true),
            AblationMode::M3 => (true, true, false),
            AblationMode::M4 => (false, true, true),
            AblationMode::M5 => (true, true, true),
        };
        LevelSet { l1, l2, l3 }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(AblationMode::M1),
            "M2" => Ok(AblationMode::M2),
            "M3" => Ok(AblationMode::M3),
            "M4" => Ok(AblationMode::M4),
            "M5" => Ok(AblationMode::M5),
            other => Err(Error::Config(format!("unknown ablation mode {other:?}"))),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSeed {
    pub name: String,
    pub summary: String,
}

impl TopicSeed {
    pub fn new(name: &str, summary: &str) -> Self {
        TopicSeed {
            name: name.into(),
            summary: summary.into(),
        }
    }
}

/// Fifteen general-purpose conversational topics.
pub fn default_topics() -> Vec<TopicSeed> {
    [
        ("personal_identity", "names, roles and self-descriptions the user has shared"),
        ("preferences", "likes, dislikes and personal choices"),
        ("plans_and_schedule", "appointments, meetings, intentions and deadlines"),
        ("health_and_wellness", "exercise, diet, sleep and medical details"),
        ("work_and_career", "job, colleagues, projects and professional details"),
        ("family_and_relationships", "family members, friends and social ties"),
        ("food_and_dining", "meals, drinks, restaurants and orders"),
        ("travel_and_places", "locations, directions, trips and places visited"),
        ("shopping_and_inventory", "shopping lists, purchases and item quantities"),
        ("hobbies_and_entertainment", "games, shows, books, jokes and pastimes"),
        ("finance", "expenses, prices, budgets and payments"),
        ("instructions_and_rules", "standing instructions, triggers and output formats"),
        ("stories_and_narratives", "narrated events, characters and plot progression"),
        ("messages_and_quotes", "verbatim messages, quotes and coded phrases"),
        ("general_knowledge", "trivia and facts that are not about the user"),
    ]
    .into_iter()
    .map(|(n, s)| TopicSeed::new(n, s))
    .collect()
}

fn default_buffer_capacity() -> usize {
    90
}
fn default_temperature() -> f64 {
    10.0
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_window() -> usize {
    10
}
fn default_episode_length() -> usize {
    4
}
fn default_max_read_iterations() -> u32 {
    3
}
fn default_true() -> bool {
    true
}
fn default_levels() -> LevelSet {
    LevelSet::ALL
}
fn default_reinforcement_delta() -> f64 {
    0.1
}
fn default_eviction_threshold() -> f64 {
    0.05
}
fn default_embedding_threshold() -> f64 {
    0.5
}
fn default_judge_threshold() -> f64 {
    0.5
}
fn default_k_per_query() -> usize {
    5
}
fn default_cluster_floor() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_temperature")]
    pub decay_temperature: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_episode_length")]
    pub episode_length: usize,
    #[serde(default = "default_max_read_iterations")]
    pub max_read_iterations: u32,
    #[serde(default = "default_true")]
    pub dynamic_topics: bool,
    #[serde(default = "default_true")]
    pub memory_linking: bool,
    #[serde(default = "default_levels")]
    pub enabled_levels: LevelSet,
    #[serde(default = "default_topics")]
    pub initial_topics: Vec<TopicSeed>,
    #[serde(default = "default_reinforcement_delta")]
    pub reinforcement_delta: f64,
    #[serde(default = "default_eviction_threshold")]
    pub eviction_threshold: f64,
    /// Mean cosine below which the buffer is considered irrelevant to the query.
    #[serde(default = "default_embedding_threshold")]
    pub embedding_threshold: f64,
    /// Judge uncertainty at or above which a cluster counts as uncertain.
    #[serde(default = "default_judge_threshold")]
    pub judge_threshold: f64,
    #[serde(default = "default_k_per_query")]
    pub k_per_query: usize,
    /// Minimum cosine against a cluster descriptor for topic assignment.
    #[serde(default = "default_cluster_floor")]
    pub cluster_match_floor: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            buffer_capacity: default_buffer_capacity(),
            decay_temperature: default_temperature(),
            epsilon: default_epsilon(),
            window: default_window(),
            episode_length: default_episode_length(),
            max_read_iterations: default_max_read_iterations(),
            dynamic_topics: true,
            memory_linking: true,
            enabled_levels: LevelSet::ALL,
            initial_topics: default_topics(),
            reinforcement_delta: default_reinforcement_delta(),
            eviction_threshold: default_eviction_threshold(),
            embedding_threshold: default_embedding_threshold(),
            judge_threshold: default_judge_threshold(),
            k_per_query: default_k_per_query(),
            cluster_match_floor: default_cluster_floor(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        self.enabled_levels = mode.levels();
        self
    }

    /// Linking only has an effect when both L2 and L3 are written.
    pub fn linking_active(&self) -> bool {
        self.memory_linking && self.enabled_levels.l2 && self.enabled_levels.l3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be > 0");
        }
        if !(self.decay_temperature.is_finite() && self.decay_temperature > 0.0) {
            return bad("decay_temperature must be finite and > 0");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be finite and > 0");
        }
        if self.window == 0 {
            return bad("window must be > 0");
        }
        if self.episode_length == 0 {
            return bad("episode_length must be > 0");
        }
        if self.max_read_iterations == 0 {
            return bad("max_read_iterations must be >= 1");
        }
        if self.enabled_levels.is_empty() {
            return bad("enabled_levels must not be empty");
        }
        if !(self.reinforcement_delta.is_finite() && self.reinforcement_delta > 0.0) {
            return bad("reinforcement_delta must be > 0");
        }
        if !(self.eviction_threshold > 0.0 && self.eviction_threshold < 1.0) {
            return bad("eviction_threshold must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.embedding_threshold) {
            return bad("embedding_threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.judge_threshold) {
            return bad("judge_threshold must lie in [0, 1]");
        }
        if self.k_per_query == 0 {
            return bad("k_per_query must be > 0");
        }
        if self.enabled_levels.l1 && self.initial_topics.is_empty() && !self.dynamic_topics {
            return bad("static topics require at least one initial topic");
        }
        Ok(())
    }
}

/// Bounded per-session cache: recent turns, loaded items, resident clusters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkingMemory {
    pub history: VecDeque<Turn>,
    pub buffer_items: Vec<BufferEntry>,
    pub clusters: BTreeMap<ClusterId, Cluster>,
    pub task_metadata: BTreeMap<String, String>,
    pub round: u32,
}

impl WorkingMemory {
    /// Append a turn, dropping the oldest ones beyond `window`.
    pub fn push_turn(&mut self, turn: Turn, window: usize) {
        self.history.push_back(turn);
        while self.history.len() > window {
            self.history.pop_front();
        }
    }

    pub fn has_memory_items(&self) -> bool {
        !self.buffer_items.is_empty()
    }

    pub fn contains_item(&self, id: &MemoryId) -> bool {
        self.buffer_items.iter().any(|b| &b.memory_id == id)
    }

    pub fn buffer_ids(&self) -> Vec<MemoryId> {
        self.buffer_items.iter().map(|b| b.memory_id.clone()).collect()
    }

    /// Checks the residency and capacity invariants.
    pub fn check_invariants(&self, config: &EngineConfig) -> std::result::Result<(), String> {
        if self.history.len() > config.window {
            return Err(format!(
                "history holds {} turns, window is {}",
                self.history.len(),
                config.window
            ));
        }
        if self.buffer_items.len() > config.buffer_capacity {
            return Err(format!(
                "buffer holds {} items, capacity is {}",
                self.buffer_items.len(),
                config.buffer_capacity
            ));
        }
        for item in &self.buffer_items {
            if !self.clusters.contains_key(&item.cluster_id) {
                return Err(format!(
                    "buffer item {} references non-resident cluster {}",
                    item.memory_id, item.cluster_id
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for item in &self.buffer_items {
            if !seen.insert(&item.memory_id) {
                return Err(format!("buffer item {} appears twice", item.memory_id));
            }
        }
        Ok(())
    }
}

/// Create the working memory for a new session.
pub fn new_session(config: &EngineConfig) -> Result<WorkingMemory> {
    config.validate()?;
    let mut wm = WorkingMemory::default();
    if !config.enabled_levels.l1 {
        return Ok(wm);
    }
    for (i, topic) in config.initial_topics.iter().enumerate() {
        let id = ClusterId::from_seq(i as u64 + 1);
        wm.clusters
            .insert(id.clone(), Cluster::new(id, &topic.name, &topic.summary, 0));
    }
    Ok(wm)
}
