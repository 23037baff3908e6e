//! Durable records of tasks and agents.
//!
//! Two backends share the [`Store`] trait: [`MemStore`] for tests and the
//! simulator, and [`FileStore`], an append-only log with snapshots:
//!
//! ```text
//! <dir>/store/log.ndjson        one LogLine per put, append-only
//! <dir>/store/snapshot.<seq>   every record as of log sequence <seq>
//! ```
//!
//! Snapshots are written to a temporary file and renamed into place. A torn
//! trailing log line (crash mid-append) is ignored on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{AgentId, TaskRecord, TaskState};
use crate::master::{AgentRecord, Liveness};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Task,
    Agent,
    /// Uploaded task archive, keyed by content hash.
    Artifact,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreKey {
    pub kind: RecordKind,
    pub id: String,
}

impl StoreKey {
    pub fn task(id: impl fmt::Display) -> Self {
        Self {
            kind: RecordKind::Task,
            id: id.to_string(),
        }
    }

    pub fn agent(id: impl fmt::Display) -> Self {
        Self {
            kind: RecordKind::Agent,
            id: id.to_string(),
        }
    }
}

impl StoreKey {
    pub fn artifact(hash: impl fmt::Display) -> Self {
        Self {
            kind: RecordKind::Artifact,
            id: hash.to_string(),
        }
    }
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            RecordKind::Task => "task",
            RecordKind::Agent => "agent",
            RecordKind::Artifact => "artifact",
        };
        write!(f, "{kind}/{}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreRecord {
    pub key: StoreKey,
    pub value: Value,
    pub version: u64,
}

impl StoreRecord {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, StoreError> {
        serde_json::from_value(self.value.clone()).map_err(|e| StoreError::Decode {
            key: self.key.clone(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("no record for {0}")]
    NotFound(StoreKey),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("record {key} does not decode: {reason}")]
    Decode { key: StoreKey, reason: String },
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StorageUnavailable(e.to_string())
    }
}

pub trait Store: Send + Sync {
    /// Durably writes `value` and returns its version (1 for a new key).
    fn put(&self, key: &StoreKey, value: Value) -> Result<u64, StoreError>;
    fn get(&self, key: &StoreKey) -> Result<StoreRecord, StoreError>;
    /// Latest version of every record of `kind`, ordered by id.
    fn scan(&self, kind: RecordKind) -> Result<Vec<StoreRecord>, StoreError>;
}

/// Typed helpers over any store.
pub trait StoreExt: Store {
    fn put_task(&self, record: &TaskRecord) -> Result<u64, StoreError> {
        let value = serde_json::to_value(record).expect("task records serialize");
        self.put(&StoreKey::task(&record.task_id), value)
    }

    fn put_agent(&self, record: &AgentRecord) -> Result<u64, StoreError> {
        let value = serde_json::to_value(record).expect("agent records serialize");
        self.put(&StoreKey::agent(&record.agent_id), value)
    }

    fn get_task(&self, id: &str) -> Result<TaskRecord, StoreError> {
        self.get(&StoreKey::task(id))?.decode()
    }

    fn get_agent(&self, id: &str) -> Result<AgentRecord, StoreError> {
        self.get(&StoreKey::agent(id))?.decode()
    }

    /// Stores archive bytes under their content hash.
    fn put_artifact(&self, hash: &str, bytes: &[u8]) -> Result<u64, StoreError> {
        let value = Value::String(crate::protocol::base64_bytes::encode(bytes));
        self.put(&StoreKey::artifact(hash), value)
    }

    fn get_artifact(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        let record = self.get(&StoreKey::artifact(hash))?;
        let text: String = record.decode()?;
        crate::protocol::base64_bytes::decode(&text).map_err(|e| StoreError::Decode {
            key: record.key,
            reason: e.to_string(),
        })
    }

    fn tasks(&self) -> Result<Vec<TaskRecord>, StoreError> {
        self.scan(RecordKind::Task)?.iter().map(StoreRecord::decode).collect()
    }

    fn agents(&self) -> Result<Vec<AgentRecord>, StoreError> {
        self.scan(RecordKind::Agent)?.iter().map(StoreRecord::decode).collect()
    }
}

impl<S: Store + ?Sized> StoreExt for S {}

#[derive(Debug, Default)]
struct MemInner {
    records: BTreeMap<StoreKey, StoreRecord>,
    unavailable: bool,
}

/// In-memory store. Clones share the same records, which is how the
/// simulator keeps cloud state across process crashes.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    inner: Arc<Mutex<MemInner>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every operation fail with `StorageUnavailable` while set.
    pub fn set_unavailable(&self, unavailable: bool) {
        self.lock().unavailable = unavailable;
    }

    fn lock(&self) -> MutexGuard<'_, MemInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check(inner: &MemInner) -> Result<(), StoreError> {
        if inner.unavailable {
            Err(StoreError::StorageUnavailable("store marked unavailable".into()))
        } else {
            Ok(())
        }
    }
}

impl Store for MemStore {
    fn put(&self, key: &StoreKey, value: Value) -> Result<u64, StoreError> {
        let mut inner = self.lock();
        Self::check(&inner)?;
        let version = inner.records.get(key).map_or(1, |r| r.version + 1);
        inner.records.insert(
            key.clone(),
            StoreRecord {
                key: key.clone(),
                value,
                version,
            },
        );
        Ok(version)
    }

    fn get(&self, key: &StoreKey) -> Result<StoreRecord, StoreError> {
        let inner = self.lock();
        Self::check(&inner)?;
        inner
            .records
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.clone()))
    }

    fn scan(&self, kind: RecordKind) -> Result<Vec<StoreRecord>, StoreError> {
        let inner = self.lock();
        Self::check(&inner)?;
        Ok(inner
            .records
            .values()
            .filter(|r| r.key.kind == kind)
            .cloned()
            .collect())
    }
}

/// Crash points for exercising the file backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failpoint {
    /// The next append writes half a line and the process dies.
    TornAppend,
    /// The next snapshot is written to its temporary file and the process
    /// dies before renaming it.
    CrashBeforeRename,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    seq: u64,
    #[serde(flatten)]
    record: StoreRecord,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    seq: u64,
    records: Vec<StoreRecord>,
}

#[derive(Debug)]
struct FileInner {
    dir: PathBuf,
    log: File,
    seq: u64,
    since_snapshot: u64,
    records: BTreeMap<StoreKey, StoreRecord>,
    failpoint: Option<Failpoint>,
    crashed: bool,
}

/// Append-log-with-snapshot store on local files.
#[derive(Debug)]
pub struct FileStore {
    inner: Mutex<FileInner>,
    snapshot_every: u64,
}

const LOG_NAME: &str = "log.ndjson";
const SNAPSHOT_PREFIX: &str = "snapshot.";

impl FileStore {
    /// Opens (or creates) the store under `<root>/store`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, 256)
    }

    /// `snapshot_every`: puts between snapshots.
    pub fn open_with(root: impl AsRef<Path>, snapshot_every: u64) -> Result<Self, StoreError> {
        let dir = root.as_ref().join("store");
        fs::create_dir_all(&dir)?;
        let (snap_seq, mut records) = load_latest_snapshot(&dir)?;
        let log_path = dir.join(LOG_NAME);
        let mut seq = snap_seq;
        let mut good_len = 0u64;
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path)?);
            let mut offset = 0u64;
            let mut lines = reader.split(b'\n').peekable();
            while let Some(line) = lines.next() {
                let line = line?;
                let len = line.len() as u64 + 1;
                let is_last = lines.peek().is_none();
                match serde_json::from_slice::<LogLine>(&line) {
                    Ok(entry) => {
                        if entry.seq > snap_seq {
                            records.insert(entry.record.key.clone(), entry.record);
                        }
                        seq = seq.max(entry.seq);
                        offset += len;
                        good_len = offset;
                    }
                    Err(_) if line.iter().all(u8::is_ascii_whitespace) => {
                        offset += len;
                        good_len = offset;
                    }
                    Err(_) if is_last => break,
                    Err(e) => {
                        return Err(StoreError::StorageUnavailable(format!(
                            "corrupt log entry at byte {offset}: {e}"
                        )))
                    }
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        // drop a torn tail so later appends start on a fresh line
        if fs::metadata(&log_path)?.len() > good_len {
            log.set_len(good_len)?;
        }
        Ok(Self {
            inner: Mutex::new(FileInner {
                dir,
                log,
                seq,
                since_snapshot: 0,
                records,
                failpoint: None,
                crashed: false,
            }),
            snapshot_every: snapshot_every.max(1),
        })
    }

    pub fn set_failpoint(&self, failpoint: Option<Failpoint>) {
        self.lock().failpoint = failpoint;
    }

    /// Writes a snapshot now.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        let mut inner = self.lock();
        inner.check()?;
        inner.write_snapshot()
    }

    fn lock(&self) -> MutexGuard<'_, FileInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn load_latest_snapshot(dir: &Path) -> Result<(u64, BTreeMap<StoreKey, StoreRecord>), StoreError> {
    let mut seqs: Vec<u64> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_prefix(SNAPSHOT_PREFIX)?
                .parse()
                .ok()
        })
        .collect();
    seqs.sort_unstable();
    for seq in seqs.into_iter().rev() {
        let text = fs::read(dir.join(format!("{SNAPSHOT_PREFIX}{seq}")))?;
        if let Ok(snap) = serde_json::from_slice::<Snapshot>(&text) {
            let records = snap.records.into_iter().map(|r| (r.key.clone(), r)).collect();
            return Ok((snap.seq, records));
        }
    }
    Ok((0, BTreeMap::new()))
}

impl FileInner {
    fn check(&self) -> Result<(), StoreError> {
        if self.crashed {
            Err(StoreError::StorageUnavailable("store crashed; reopen it".into()))
        } else {
            Ok(())
        }
    }

    fn write_snapshot(&mut self) -> Result<(), StoreError> {
        let snap = Snapshot {
            seq: self.seq,
            records: self.records.values().cloned().collect(),
        };
        let final_path = self.dir.join(format!("{SNAPSHOT_PREFIX}{}", self.seq));
        let tmp_path = self.dir.join(format!(".{SNAPSHOT_PREFIX}{}.tmp", self.seq));
        {
            let mut tmp = File::create(&tmp_path)?;
            serde_json::to_writer(&mut tmp, &snap).expect("snapshot serializes");
            tmp.sync_all()?;
        }
        if self.failpoint.take() == Some(Failpoint::CrashBeforeRename) {
            self.crashed = true;
            return Err(StoreError::StorageUnavailable("crashed before rename".into()));
        }
        fs::rename(&tmp_path, &final_path)?;
        for entry in fs::read_dir(&self.dir)?.filter_map(|e| e.ok()) {
            let name = entry.file_name();
            let Some(seq) = name
                .to_str()
                .and_then(|n| n.strip_prefix(SNAPSHOT_PREFIX))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            if seq < self.seq {
                let _ = fs::remove_file(entry.path());
            }
        }
        self.since_snapshot = 0;
        Ok(())
    }
}

impl Store for FileStore {
    fn put(&self, key: &StoreKey, value: Value) -> Result<u64, StoreError> {
        let mut inner = self.lock();
        inner.check()?;
        if inner.since_snapshot >= self.snapshot_every {
            inner.write_snapshot()?;
        }
        let version = inner.records.get(key).map_or(1, |r| r.version + 1);
        let record = StoreRecord {
            key: key.clone(),
            value,
            version,
        };
        let line = LogLine {
            seq: inner.seq + 1,
            record,
        };
        let mut bytes = serde_json::to_vec(&line).expect("log lines serialize");
        bytes.push(b'\n');
        if inner.failpoint == Some(Failpoint::TornAppend) {
            inner.failpoint = None;
            inner.crashed = true;
            let half = bytes.len() / 2;
            inner.log.write_all(&bytes[..half])?;
            inner.log.sync_data()?;
            return Err(StoreError::StorageUnavailable("crashed mid-append".into()));
        }
        inner.log.write_all(&bytes)?;
        inner.log.sync_data()?;
        inner.seq = line.seq;
        inner.since_snapshot += 1;
        inner.records.insert(key.clone(), line.record);
        Ok(version)
    }

    fn get(&self, key: &StoreKey) -> Result<StoreRecord, StoreError> {
        let inner = self.lock();
        inner.check()?;
        inner
            .records
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.clone()))
    }

    fn scan(&self, kind: RecordKind) -> Result<Vec<StoreRecord>, StoreError> {
        let inner = self.lock();
        inner.check()?;
        Ok(inner
            .records
            .values()
            .filter(|r| r.key.kind == kind)
            .cloned()
            .collect())
    }
}

/// Framework state rebuilt from the store after a restart.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoveredFramework {
    /// Waiting for placement, oldest first.
    pub queued: Vec<TaskRecord>,
    /// Staging or Running on an agent the store still knows; awaiting the
    /// master's confirmation.
    pub in_flight: Vec<TaskRecord>,
    /// Lost, or in flight on an agent that is unknown or disconnected.
    pub lost: Vec<TaskRecord>,
    /// Failed and not yet restarted.
    pub failed: Vec<TaskRecord>,
    /// Finished or Killed; history only.
    pub terminal: Vec<TaskRecord>,
}

impl RecoveredFramework {
    pub fn is_empty(&self) -> bool {
        self.queued.is_empty()
            && self.in_flight.is_empty()
            && self.lost.is_empty()
            && self.failed.is_empty()
            && self.terminal.is_empty()
    }

    pub fn non_terminal(&self) -> usize {
        self.queued.len() + self.in_flight.len() + self.lost.len() + self.failed.len()
    }
}

/// Sorts persisted tasks into the buckets a restarted scheduler needs.
pub fn recover_framework(store: &dyn Store) -> Result<RecoveredFramework, StoreError> {
    let known: BTreeSet<AgentId> = store
        .agents()?
        .into_iter()
        .filter(|a| !matches!(a.liveness, Liveness::Disconnected { .. }))
        .map(|a| a.agent_id)
        .collect();
    let mut tasks = store.tasks()?;
    tasks.sort_by(|a, b| (a.created_at(), &a.task_id).cmp(&(b.created_at(), &b.task_id)));
    let mut out = RecoveredFramework::default();
    for task in tasks {
        match task.state {
            TaskState::Queued => out.queued.push(task),
            TaskState::Staging | TaskState::Running => {
                let on_known = task.assigned_agent.as_ref().is_some_and(|a| known.contains(a));
                if on_known {
                    out.in_flight.push(task);
                } else {
                    out.lost.push(task);
                }
            }
            TaskState::Lost => out.lost.push(task),
            TaskState::Failed => out.failed.push(task),
            TaskState::Finished | TaskState::Killed => out.terminal.push(task),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn mem_put_get_versions() {
        let store = MemStore::new();
        let key = StoreKey::task("t1");
        assert_eq!(store.put(&key, json!({"a": 1})).unwrap(), 1);
        assert_eq!(store.get(&key).unwrap().value, json!({"a": 1}));
        assert_eq!(store.put(&key, json!({"a": 2})).unwrap(), 2);
        let got = store.get(&key).unwrap();
        assert_eq!((got.value, got.version), (json!({"a": 2}), 2));
        assert!(matches!(
            store.get(&StoreKey::task("nope")),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn mem_unavailable() {
        let store = MemStore::new();
        store.set_unavailable(true);
        assert!(matches!(
            store.put(&StoreKey::agent("a"), json!(1)),
            Err(StoreError::StorageUnavailable(_))
        ));
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open_with(dir.path(), 2).unwrap();
            for i in 0..5 {
                store.put(&StoreKey::task("t1"), json!(i)).unwrap();
            }
            store.put(&StoreKey::agent("a1"), json!("x")).unwrap();
        }
        let store = FileStore::open(dir.path()).unwrap();
        let t = store.get(&StoreKey::task("t1")).unwrap();
        assert_eq!((t.value, t.version), (json!(4), 5));
        assert_eq!(store.scan(RecordKind::Agent).unwrap().len(), 1);
        assert_eq!(store.put(&StoreKey::task("t1"), json!(5)).unwrap(), 6);
    }

    #[test]
    fn torn_append_keeps_previous_version() {
        let dir = tempfile::tempdir().unwrap();
        let key = StoreKey::task("t1");
        {
            let store = FileStore::open(dir.path()).unwrap();
            store.put(&key, json!("v1")).unwrap();
            store.set_failpoint(Some(Failpoint::TornAppend));
            assert!(store.put(&key, json!("v2")).is_err());
            assert!(store.get(&key).is_err(), "crashed store refuses reads");
        }
        let store = FileStore::open(dir.path()).unwrap();
        let got = store.get(&key).unwrap();
        assert_eq!((got.value, got.version), (json!("v1"), 1));
        store.put(&key, json!("v3")).unwrap();
        drop(store);
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.get(&key).unwrap().value, json!("v3"));
    }

    #[test]
    fn crash_before_rename_keeps_previous_version() {
        let dir = tempfile::tempdir().unwrap();
        let key = StoreKey::task("t1");
        {
            let store = FileStore::open_with(dir.path(), 1).unwrap();
            store.put(&key, json!("v1")).unwrap();
            store.set_failpoint(Some(Failpoint::CrashBeforeRename));
            assert!(store.put(&key, json!("v2")).is_err());
        }
        let store = FileStore::open_with(dir.path(), 1).unwrap();
        let got = store.get(&key).unwrap();
        assert_eq!((got.value, got.version), (json!("v1"), 1));
    }

    #[test]
    fn empty_store_recovers_nothing() {
        let store = MemStore::new();
        assert!(recover_framework(&store).unwrap().is_empty());
    }
}
