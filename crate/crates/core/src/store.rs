//! Persistent store: an append-only record log with exact cosine search.
//!
//! On disk a store is a directory holding two UTF-8, newline-delimited files:
//!
//! * `records.jsonl`: one [`StoredRecord`] per line. A record id appears
//!   again when its statistics or links change; the latest line wins.
//! * `journal.jsonl`: one [`JournalEntry`] per committed turn, naming the
//!   record lines the turn wrote and a SHA-256 checksum over them.
//!
//! Record lines are written before their journal line, so a crash can only
//! leave an uncommitted tail, which [`Store::open`] discards.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::model::{Level, MemoryId, MemoryRecord, TurnIndex};
use crate::text::words;

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const TEST_EMBEDDING_DIM: usize = 256;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding for {0} is not unit-normalized")]
    NotNormalized(MemoryId),
    #[error("record {0} is invalid: {1}")]
    InvalidRecord(MemoryId, String),
    #[error("store io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub schema_version: u32,
    pub memory_id: MemoryId,
    pub level: Level,
    pub payload: MemoryRecord,
    pub embedding: Vec<f64>,
    pub committed_turn: TurnIndex,
}

impl StoredRecord {
    pub fn new(payload: MemoryRecord, embedding: Vec<f64>, committed_turn: TurnIndex) -> Self {
        StoredRecord {
            schema_version: SCHEMA_VERSION,
            memory_id: payload.id().clone(),
            level: payload.level(),
            payload,
            embedding,
            committed_turn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub turn_index: TurnIndex,
    pub record_ids: Vec<MemoryId>,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub memory_id: MemoryId,
    pub cosine: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len().min(b.len()) {
        acc += a[i] * b[i];
    }
    acc
}

/// Scale `v` to unit length; `None` for the zero vector.
pub fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Deterministic bag-of-words embedder: each lowercased token adds one to
/// the bucket chosen by its FNV-1a hash, then the vector is L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        HashEmbedder { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(TEST_EMBEDDING_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut v = vec![0.0; self.dimension];
        let tokens = words(text);
        if tokens.is_empty() {
            v[self.bucket("\u{2205}")] = 1.0;
        }
        for t in &tokens {
            v[self.bucket(t)] += 1.0;
        }
        Ok(normalize(v).expect("at least one bucket is set"))
    }
}

#[derive(Debug)]
struct Files {
    dir: PathBuf,
    records: File,
    journal: File,
}

/// Crash injection for tests: abort a commit after the record lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    BeforeJournal,
}

#[derive(Debug)]
pub struct Store {
    dimension: usize,
    /// Latest version of every record, in first-commit order.
    records: Vec<StoredRecord>,
    index: HashMap<MemoryId, usize>,
    next_seq: u64,
    journal: Vec<JournalEntry>,
    files: Option<Files>,
    fail_point: Option<FailPoint>,
}

fn checksum(lines: &[String]) -> String {
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

impl Store {
    pub fn in_memory(dimension: usize) -> Self {
        Store {
            dimension,
            records: Vec::new(),
            index: HashMap::new(),
            next_seq: 1,
            journal: Vec::new(),
            files: None,
            fail_point: None,
        }
    }

    /// Open (or create) a store directory, discarding any uncommitted tail.
    pub fn open(dir: impl AsRef<Path>, dimension: usize) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let recovered = recover(&dir)?;
        let mut store = Store::in_memory(dimension);
        for (entry, records) in &recovered.commits {
            for r in records {
                store.validate(r)?;
            }
            store.apply(entry.clone(), records.clone());
        }
        truncate(&dir.join(RECORDS_FILE), recovered.records_len)?;
        truncate(&dir.join(JOURNAL_FILE), recovered.journal_len)?;
        let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
        store.files = Some(Files {
            records: open(RECORDS_FILE)?,
            journal: open(JOURNAL_FILE)?,
            dir,
        });
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.files.as_ref().map(|f| f.dir.as_path())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of distinct records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<MemoryId> {
        self.records.iter().map(|r| r.memory_id.clone()).collect()
    }

    pub fn get(&self, id: &MemoryId) -> Option<&StoredRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> impl Iterator<Item = &StoredRecord> {
        self.records.iter()
    }

    pub fn count_level(&self, level: Level) -> usize {
        self.records.iter().filter(|r| r.level == level).count()
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    /// Reserve a fresh monotone id. Within one open store, ids reserved by an
    /// aborted turn are not handed out again; reopening resumes after the
    /// highest committed id.
    pub fn allocate_id(&mut self) -> MemoryId {
        let id = MemoryId::from_seq(self.next_seq);
        self.next_seq += 1;
        id
    }

    #[doc(hidden)]
    pub fn set_fail_point(&mut self, point: Option<FailPoint>) {
        self.fail_point = point;
    }

    fn validate(&self, record: &StoredRecord) -> Result<(), StoreError> {
        let id = &record.memory_id;
        if record.embedding.len() != self.dimension {
            return Err(StoreError::Dimension {
                expected: self.dimension,
                got: record.embedding.len(),
            });
        }
        let norm = dot(&record.embedding, &record.embedding).sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(StoreError::NotNormalized(id.clone()));
        }
        if record.payload.id() != id || record.payload.level() != record.level {
            return Err(StoreError::InvalidRecord(id.clone(), "envelope does not match payload".into()));
        }
        if record.payload.text().trim().is_empty() {
            return Err(StoreError::InvalidRecord(id.clone(), "content is empty".into()));
        }
        if let Some(existing) = self.get(id) {
            if existing.level != record.level {
                return Err(StoreError::InvalidRecord(id.clone(), "level changed".into()));
            }
        }
        Ok(())
    }

    fn apply(&mut self, entry: JournalEntry, records: Vec<StoredRecord>) {
        for r in records {
            let seq = r.memory_id.as_str()[1..].parse::<u64>().unwrap_or(0);
            self.next_seq = self.next_seq.max(seq + 1);
            match self.index.get(&r.memory_id) {
                Some(&i) => self.records[i] = r,
                None => {
                    self.index.insert(r.memory_id.clone(), self.records.len());
                    self.records.push(r);
                }
            }
        }
        self.journal.push(entry);
    }

    /// Append one turn's records atomically. Returns ids in input order.
    pub fn append(&mut self, turn: TurnIndex, records: Vec<StoredRecord>) -> Result<Vec<MemoryId>, StoreError> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        for r in &records {
            self.validate(r)?;
        }
        let lines = records
            .iter()
            .map(|r| serde_json::to_string(r).map_err(|e| StoreError::Corrupt(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let ids: Vec<MemoryId> = records.iter().map(|r| r.memory_id.clone()).collect();
        let entry = JournalEntry {
            turn_index: turn,
            record_ids: ids.clone(),
            checksum: checksum(&lines),
        };
        if let Some(files) = &mut self.files {
            let mut block = String::new();
            for line in &lines {
                block.push_str(line);
                block.push('\n');
            }
            files.records.write_all(block.as_bytes())?;
            files.records.flush()?;
            if self.fail_point == Some(FailPoint::BeforeJournal) {
                return Err(StoreError::Io(std::io::Error::other("injected failure before journal commit")));
            }
            let mut jline = serde_json::to_string(&entry).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            jline.push('\n');
            files.journal.write_all(jline.as_bytes())?;
            files.journal.flush()?;
        } else if self.fail_point == Some(FailPoint::BeforeJournal) {
            return Err(StoreError::Io(std::io::Error::other("injected failure before journal commit")));
        }
        self.apply(entry, records);
        Ok(ids)
    }

    /// Exact top-k cosine search. Ties: newer `committed_turn` first, then id.
    pub fn search(&self, query: &[f64], level: Option<Level>, k: usize) -> Vec<SearchHit> {
        let mut scored: Vec<(f64, &StoredRecord)> = self
            .records
            .iter()
            .filter(|r| level.is_none_or(|l| r.level == l))
            .map(|r| (dot(query, &r.embedding), r))
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| b.1.committed_turn.cmp(&a.1.committed_turn))
                .then_with(|| a.1.memory_id.cmp(&b.1.memory_id))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(cosine, r)| SearchHit {
                memory_id: r.memory_id.clone(),
                cosine,
            })
            .collect()
    }
}

struct Recovered {
    commits: Vec<(JournalEntry, Vec<StoredRecord>)>,
    records_len: u64,
    journal_len: u64,
}

fn read_lines(path: &Path) -> Result<Vec<(String, u64)>, StoreError> {
    let mut out = Vec::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut end = 0u64;
    loop {
        let mut buf = Vec::new();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 || buf.last() != Some(&b'\n') {
            break;
        }
        end += n as u64;
        buf.pop();
        match String::from_utf8(buf) {
            Ok(line) => out.push((line, end)),
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Walk the journal and match each entry against the next record lines.
/// Stops at the first entry that is unparsable or whose lines do not check out.
fn recover(dir: &Path) -> Result<Recovered, StoreError> {
    let journal = read_lines(&dir.join(JOURNAL_FILE))?;
    let records = read_lines(&dir.join(RECORDS_FILE))?;
    let mut commits = Vec::new();
    let mut cursor = 0usize;
    let mut records_len = 0u64;
    let mut journal_len = 0u64;
    for (jline, jend) in journal {
        let Ok(entry) = serde_json::from_str::<JournalEntry>(&jline) else { break };
        let n = entry.record_ids.len();
        if cursor + n > records.len() {
            break;
        }
        let block: Vec<String> = records[cursor..cursor + n].iter().map(|(l, _)| l.clone()).collect();
        if checksum(&block) != entry.checksum {
            break;
        }
        let parsed: Result<Vec<StoredRecord>, _> = block.iter().map(|l| serde_json::from_str(l)).collect();
        let Ok(parsed) = parsed else { break };
        if parsed.iter().zip(&entry.record_ids).any(|(r, id)| &r.memory_id != id) {
            break;
        }
        if n > 0 {
            records_len = records[cursor + n - 1].1;
        }
        cursor += n;
        journal_len = jend;
        commits.push((entry, parsed));
    }
    Ok(Recovered {
        commits,
        records_len,
        journal_len,
    })
}

fn truncate(path: &Path, len: u64) -> Result<(), StoreError> {
    if path.exists() && fs::metadata(path)?.len() != len {
        OpenOptions::new().write(true).open(path)?.set_len(len)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub commits: usize,
    pub records: usize,
    pub identical: bool,
}

/// Rebuild a store from `source`'s journal into `target` by re-appending every
/// committed turn, then compare the resulting record files byte for byte.
pub fn replay(source: &Path, target: &Path, dimension: usize) -> Result<ReplayReport, StoreError> {
    let recovered = recover(source)?;
    if target.join(RECORDS_FILE).exists() || target.join(JOURNAL_FILE).exists() {
        return Err(StoreError::Corrupt(format!("replay target {} is not empty", target.display())));
    }
    let mut rebuilt = Store::open(target, dimension)?;
    let mut count = 0;
    for (entry, records) in &recovered.commits {
        count += records.len();
        rebuilt.append(entry.turn_index, records.clone())?;
    }
    drop(rebuilt);
    let original = fs::read(source.join(RECORDS_FILE)).unwrap_or_default();
    let copy = fs::read(target.join(RECORDS_FILE)).unwrap_or_default();
    let committed = &original[..(recovered.records_len as usize).min(original.len())];
    let ojournal = fs::read(source.join(JOURNAL_FILE)).unwrap_or_default();
    let cjournal = fs::read(target.join(JOURNAL_FILE)).unwrap_or_default();
    Ok(ReplayReport {
        commits: recovered.commits.len(),
        records: count,
        identical: committed == copy.as_slice()
            && ojournal[..(recovered.journal_len as usize).min(ojournal.len())] == cjournal[..],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClusterId, MemoryType, SemanticMemory, Speaker, UsageStats};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    pub(crate) fn fact(id: MemoryId, content: &str, turn: TurnIndex) -> MemoryRecord {
        MemoryRecord::Semantic(SemanticMemory {
            memory_id: id,
            content: content.into(),
            memory_type: MemoryType::Fact,
            created_turn: turn,
            created_at: turn as f64,
            cluster_id: ClusterId::unclustered(),
            stats: UsageStats::fresh(turn),
            linked_episodes: BTreeSet::new(),
            source: Speaker::User,
            tags: vec![],
            attribute: None,
        })
    }

    fn record(store: &mut Store, content: &str, turn: TurnIndex) -> StoredRecord {
        let id = store.allocate_id();
        let emb = HashEmbedder::default().embed(content).unwrap();
        StoredRecord::new(fact(id, content, turn), emb, turn)
    }

    #[test]
    fn hash_embedder_examples() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed("abc").unwrap(), e.embed("abc").unwrap());
        assert_ne!(e.bucket("x"), e.bucket("y"));
        assert_eq!(dot(&e.embed("x").unwrap(), &e.embed("y").unwrap()), 0.0);
        // [1,1,0]·[1,0,1] / (√2·√2) = 0.5 when a, b, c land in distinct buckets.
        let buckets: BTreeSet<usize> = ["a", "b", "c"].iter().map(|t| e.bucket(t)).collect();
        assert_eq!(buckets.len(), 3);
        let c = dot(&e.embed("a b").unwrap(), &e.embed("a c").unwrap());
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn append_grows_store_with_monotone_ids() {
        let mut store = Store::in_memory(TEST_EMBEDDING_DIM);
        let recs: Vec<_> = (0..3).map(|i| record(&mut store, &format!("fact {i}"), 1)).collect();
        let ids = store.append(1, recs).unwrap();
        assert_eq!(store.len(), 3);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mismatched_dimension_is_rejected() {
        let mut store = Store::in_memory(8);
        let id = store.allocate_id();
        let mut emb = vec![0.0; 4];
        emb[0] = 1.0;
        let err = store.append(1, vec![StoredRecord::new(fact(id, "x", 1), emb, 1)]).unwrap_err();
        assert!(matches!(err, StoreError::Dimension { expected: 8, got: 4 }));
        assert!(store.is_empty());
    }

    #[test]
    fn unnormalized_embedding_is_rejected() {
        let mut store = Store::in_memory(2);
        let id = store.allocate_id();
        let err = store.append(1, vec![StoredRecord::new(fact(id, "x", 1), vec![1.0, 1.0], 1)]).unwrap_err();
        assert!(matches!(err, StoreError::NotNormalized(_)));
    }

    #[test]
    fn search_examples() {
        let mut store = Store::in_memory(TEST_EMBEDDING_DIM);
        let recs: Vec<_> = ["red apple", "green pear", "blue sky"]
            .iter()
            .map(|t| record(&mut store, t, 1))
            .collect();
        store.append(1, recs).unwrap();
        let q = HashEmbedder::default().embed("green pear").unwrap();
        let hits = store.search(&q, Some(Level::L2), 2);
        assert_eq!(hits[0].memory_id, MemoryId::from_seq(2));
        assert!((hits[0].cosine - 1.0).abs() < 1e-12);
        assert_eq!(store.search(&q, None, 10).len(), 3);
        assert!(store.search(&q, Some(Level::L3), 10).is_empty());
    }

    #[test]
    fn ties_prefer_newer_commits() {
        let mut store = Store::in_memory(TEST_EMBEDDING_DIM);
        let a = record(&mut store, "same text", 1);
        store.append(1, vec![a]).unwrap();
        let b = record(&mut store, "same text", 2);
        store.append(2, vec![b]).unwrap();
        let q = HashEmbedder::default().embed("same text").unwrap();
        let hits = store.search(&q, None, 2);
        assert_eq!(hits[0].memory_id, MemoryId::from_seq(2));
    }

    #[test]
    fn reopen_restores_latest_versions() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path(), TEST_EMBEDDING_DIM).unwrap();
        let r = record(&mut store, "hello world", 1);
        store.append(1, vec![r.clone()]).unwrap();
        let mut updated = r.clone();
        updated.payload.stats_mut().utility = 0.7;
        updated.committed_turn = 3;
        store.append(3, vec![updated]).unwrap();
        assert_eq!(store.len(), 1);
        drop(store);

        let mut store = Store::open(dir.path(), TEST_EMBEDDING_DIM).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.get(&r.memory_id).unwrap().payload.stats().utility, 0.7);
        assert_eq!(store.journal().len(), 2);
        assert_eq!(store.allocate_id(), MemoryId::from_seq(2));
    }

    #[test]
    fn crash_before_journal_leaves_store_unchanged_after_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path(), TEST_EMBEDDING_DIM).unwrap();
        let first = record(&mut store, "kept", 1);
        store.append(1, vec![first]).unwrap();
        let before = fs::read(dir.path().join(RECORDS_FILE)).unwrap();

        store.set_fail_point(Some(FailPoint::BeforeJournal));
        let recs = vec![record(&mut store, "lost a", 2), record(&mut store, "lost b", 2)];
        assert!(store.append(2, recs).is_err());
        assert_eq!(store.len(), 1);
        drop(store);

        let store = Store::open(dir.path(), TEST_EMBEDDING_DIM).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(fs::read(dir.path().join(RECORDS_FILE)).unwrap(), before);
    }

    #[test]
    fn replay_reproduces_the_record_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("src"), TEST_EMBEDDING_DIM).unwrap();
        for t in 1..5 {
            let r = record(&mut store, &format!("turn {t} note"), t);
            store.append(t, vec![r]).unwrap();
        }
        drop(store);
        let report = replay(&dir.path().join("src"), &dir.path().join("copy"), TEST_EMBEDDING_DIM).unwrap();
        assert_eq!(report.commits, 4);
        assert!(report.identical);
    }

    proptest! {
        #[test]
        fn any_prefix_of_the_log_parses(cut_records in 0usize..4000, cut_journal in 0usize..2000) {
            let dir = tempfile::tempdir().unwrap();
            let mut store = Store::open(dir.path(), TEST_EMBEDDING_DIM).unwrap();
            let mut committed = Vec::new();
            for t in 1..6u64 {
                let recs = vec![record(&mut store, &format!("a{t}"), t), record(&mut store, &format!("b{t}"), t)];
                committed.push(store.append(t, recs).unwrap());
            }
            drop(store);
            for (name, cut) in [(RECORDS_FILE, cut_records * 7), (JOURNAL_FILE, cut_journal)] {
                let p = dir.path().join(name);
                let len = fs::metadata(&p).unwrap().len();
                OpenOptions::new().write(true).open(&p).unwrap().set_len(len.min(cut as u64)).unwrap();
            }
            let store = Store::open(dir.path(), TEST_EMBEDDING_DIM).unwrap();
            // The surviving ids are exactly a prefix of the committed turns.
            let ids = store.ids();
            let flat: Vec<MemoryId> = committed.concat();
            prop_assert_eq!(&flat[..ids.len()], &ids[..]);
            prop_assert_eq!(ids.len() % 2, 0);
        }
    }
}
