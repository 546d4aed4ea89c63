//! Central append-only data store.
//!
//! Everything the workflow produces lands here: experiment descriptions,
//! experiment-data from actions, monitoring-data from the poller, and run
//! events from the scheduler. Records are never modified or removed. A store is
//! either purely in memory or backed by a single length-prefixed log file (see
//! `docs/store-format.md`) whose index is rebuilt when the file is opened.

mod clock;
mod filter;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use filter::{PayloadPredicate, QueryFilter};

#[allow(unused_imports)]
pub(crate) use filter::lookup;

/// Magic bytes at the start of every log file.
pub const LOG_MAGIC: &[u8; 8] = b"MBSTORE1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Description,
    ExperimentData,
    MonitoringData,
    RunEvent,
}

impl RecordKind {
    pub const ALL: [RecordKind; 4] = [
        RecordKind::Description,
        RecordKind::ExperimentData,
        RecordKind::MonitoringData,
        RecordKind::RunEvent,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Description => "description",
            RecordKind::ExperimentData => "experiment_data",
            RecordKind::MonitoringData => "monitoring_data",
            RecordKind::RunEvent => "run_event",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// A record as submitted by a writer; id and timestamp are assigned by the store.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub kind: RecordKind,
    pub run_id: Option<String>,
    pub node_id: Option<String>,
    pub payload: Value,
}

impl NewRecord {
    pub fn new(kind: RecordKind, payload: Value) -> Self {
        Self {
            kind,
            run_id: None,
            node_id: None,
            payload,
        }
    }

    pub fn run(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = Some(run_id.into());
        self
    }

    pub fn node(mut self, node_id: impl Into<String>) -> Self {
        self.node_id = Some(node_id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    pub timestamp: u64,
    pub payload: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("experiment_data records need a run_id")]
    MissingRunId,
    #[error("monitoring_data records need a node_id")]
    MissingNodeId,
    #[error("payload must be a JSON object")]
    NotADocument,
    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt store at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("bad import line {line}: {reason}")]
    Import { line: usize, reason: String },
}

/// When an append is considered durable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// `fsync` after every record.
    #[default]
    Always,
    /// Written to the OS before returning; survives process death, not power loss.
    OsBuffered,
}

struct Stored {
    id: u64,
    kind: RecordKind,
    run_id: Option<Arc<str>>,
    node_id: Option<Arc<str>>,
    timestamp: u64,
    payload: Box<str>,
}

impl Stored {
    fn to_record(&self) -> Record {
        Record {
            id: self.id,
            kind: self.kind,
            run_id: self.run_id.as_deref().map(str::to_string),
            node_id: self.node_id.as_deref().map(str::to_string),
            timestamp: self.timestamp,
            payload: serde_json::from_str(&self.payload).expect("stored payloads are valid JSON"),
        }
    }
}

#[derive(Default)]
struct Index {
    records: Vec<Stored>,
    by_kind: [Vec<usize>; 4],
    by_run: HashMap<Arc<str>, Vec<usize>>,
    by_node: HashMap<Arc<str>, Vec<usize>>,
}

impl Index {
    fn push(&mut self, s: Stored) {
        let pos = self.records.len();
        self.by_kind[s.kind.slot()].push(pos);
        if let Some(r) = &s.run_id {
            self.by_run.entry(r.clone()).or_default().push(pos);
        }
        if let Some(n) = &s.node_id {
            self.by_node.entry(n.clone()).or_default().push(pos);
        }
        self.records.push(s);
    }

    fn intern(map: &HashMap<Arc<str>, Vec<usize>>, s: String) -> Arc<str> {
        map.get_key_value(s.as_str())
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| Arc::from(s))
    }

    /// Positions of candidate records in id order, narrowed by the cheapest index.
    fn candidates(&self, filter: &QueryFilter) -> Vec<usize> {
        let mut lists: Vec<&[usize]> = Vec::new();
        if let Some(r) = &filter.run_id {
            lists.push(self.by_run.get(r.as_str()).map_or(&[], Vec::as_slice));
        }
        if let Some(n) = &filter.node_id {
            lists.push(self.by_node.get(n.as_str()).map_or(&[], Vec::as_slice));
        }
        if filter.kinds.len() == 1 {
            let k = *filter.kinds.iter().next().unwrap();
            lists.push(&self.by_kind[k.slot()]);
        }
        let base: Vec<usize> = match lists.into_iter().min_by_key(|l| l.len()) {
            Some(l) => l.to_vec(),
            None if !filter.kinds.is_empty() => {
                let mut v: Vec<usize> = filter
                    .kinds
                    .iter()
                    .flat_map(|k| self.by_kind[k.slot()].iter().copied())
                    .collect();
                v.sort_unstable();
                v
            }
            None => (0..self.records.len()).collect(),
        };
        // timestamps are non-decreasing in id order
        let lo = filter.from.map_or(0, |f| base.partition_point(|&p| self.records[p].timestamp < f));
        let hi = filter
            .to
            .map_or(base.len(), |t| base.partition_point(|&p| self.records[p].timestamp < t));
        base[lo..hi.max(lo)].to_vec()
    }
}

struct Writer {
    file: File,
    sync: SyncPolicy,
}

pub struct Store {
    index: RwLock<Index>,
    writer: Mutex<Option<Writer>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("len", &self.len()).finish()
    }
}

fn encode(s: &Stored) -> Vec<u8> {
    #[derive(Serialize)]
    struct Doc<'a> {
        id: u64,
        kind: RecordKind,
        #[serde(skip_serializing_if = "Option::is_none")]
        run_id: Option<&'a str>,
        #[serde(skip_serializing_if = "Option::is_none")]
        node_id: Option<&'a str>,
        timestamp: u64,
        payload: &'a serde_json::value::RawValue,
    }
    let payload: &serde_json::value::RawValue =
        serde_json::from_str(&s.payload).expect("stored payloads are valid JSON");
    serde_json::to_vec(&Doc {
        id: s.id,
        kind: s.kind,
        run_id: s.run_id.as_deref(),
        node_id: s.node_id.as_deref(),
        timestamp: s.timestamp,
        payload,
    })
    .expect("records serialize")
}

fn check_kind_fields(kind: RecordKind, run_id: Option<&str>, node_id: Option<&str>) -> Result<(), StoreError> {
    match kind {
        RecordKind::ExperimentData if run_id.is_none() => Err(StoreError::MissingRunId),
        RecordKind::MonitoringData if node_id.is_none() => Err(StoreError::MissingNodeId),
        _ => Ok(()),
    }
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            index: RwLock::new(Index::default()),
            writer: Mutex::new(None),
            clock,
        }
    }

    /// Opens or creates a log-backed store, rebuilding the index from the file.
    ///
    /// A torn final record (a crash mid-append) is cut off; any other damage is an error.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>, sync: SyncPolicy) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut index = Index::default();
        if bytes.is_empty() {
            file.write_all(LOG_MAGIC)?;
            if sync == SyncPolicy::Always {
                file.sync_all()?;
            }
        } else {
            let good = load_log(&bytes, &mut index)?;
            if good < bytes.len() as u64 {
                log::warn!(
                    "{}: discarding {} bytes of incomplete trailing record",
                    path.display(),
                    bytes.len() as u64 - good
                );
                file.set_len(good)?;
                file.seek(SeekFrom::End(0))?;
            }
        }
        Ok(Self {
            index: RwLock::new(index),
            writer: Mutex::new(Some(Writer { file, sync })),
            clock,
        })
    }

    /// Rebuilds an in-memory store from an export stream, keeping ids and timestamps.
    pub fn import(reader: impl BufRead, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let store = Self::in_memory(clock);
        {
            let mut index = store.index.write().unwrap();
            let mut last_id = 0;
            let mut last_ts = 0;
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let fail = |reason: String| StoreError::Import { line: i + 1, reason };
                let rec: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
                if rec.id <= last_id {
                    return Err(fail(format!("id {} does not increase", rec.id)));
                }
                if rec.timestamp < last_ts {
                    return Err(fail("timestamps go backwards".into()));
                }
                if !rec.payload.is_object() {
                    return Err(fail("payload is not an object".into()));
                }
                check_kind_fields(rec.kind, rec.run_id.as_deref(), rec.node_id.as_deref())
                    .map_err(|e| fail(e.to_string()))?;
                last_id = rec.id;
                last_ts = rec.timestamp;
                let stored = Stored {
                    id: rec.id,
                    kind: rec.kind,
                    run_id: rec.run_id.map(|r| Index::intern(&index.by_run, r)),
                    node_id: rec.node_id.map(|n| Index::intern(&index.by_node, n)),
                    timestamp: rec.timestamp,
                    payload: rec.payload.to_string().into_boxed_str(),
                };
                index.push(stored);
            }
        }
        Ok(store)
    }

    /// Appends a record and returns its id once it is durable.
    pub fn append(&self, record: NewRecord) -> Result<u64, StoreError> {
        check_kind_fields(record.kind, record.run_id.as_deref(), record.node_id.as_deref())?;
        if !record.payload.is_object() {
            return Err(StoreError::NotADocument);
        }
        let payload = record.payload.to_string().into_boxed_str();

        let mut writer = self.writer.lock().unwrap();
        let (id, timestamp, run_id, node_id) = {
            let index = self.index.read().unwrap();
            let last = index.records.last();
            let id = last.map_or(1, |r| r.id + 1);
            let timestamp = self.clock.now().max(last.map_or(0, |r| r.timestamp));
            (
                id,
                timestamp,
                record.run_id.map(|r| Index::intern(&index.by_run, r)),
                record.node_id.map(|n| Index::intern(&index.by_node, n)),
            )
        };
        let stored = Stored {
            id,
            kind: record.kind,
            run_id,
            node_id,
            timestamp,
            payload,
        };
        if let Some(w) = writer.as_mut() {
            let body = encode(&stored);
            let mut frame = Vec::with_capacity(body.len() + 4);
            frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
            frame.extend_from_slice(&body);
            w.file.write_all(&frame)?;
            w.file.flush()?;
            if w.sync == SyncPolicy::Always {
                w.file.sync_data()?;
            }
        }
        self.index.write().unwrap().push(stored);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_id(&self) -> u64 {
        self.index.read().unwrap().records.last().map_or(0, |r| r.id)
    }

    pub fn get(&self, id: u64) -> Option<Record> {
        let index = self.index.read().unwrap();
        let pos = index.records.binary_search_by_key(&id, |r| r.id).ok()?;
        Some(index.records[pos].to_record())
    }

    /// Calls `f` on every matching record in id order.
    pub fn scan(&self, filter: &QueryFilter, mut f: impl FnMut(Record)) {
        let index = self.index.read().unwrap();
        for pos in index.candidates(filter) {
            let s = &index.records[pos];
            if !filter.matches_header(s.kind, s.timestamp, s.run_id.as_deref(), s.node_id.as_deref()) {
                continue;
            }
            let rec = s.to_record();
            if filter.predicates.iter().all(|p| p.matches(&rec.payload)) {
                f(rec);
            }
        }
    }

    pub fn query(&self, filter: &QueryFilter) -> Vec<Record> {
        let mut out = Vec::new();
        self.scan(filter, |r| out.push(r));
        out
    }

    /// Writes matching records as newline-delimited JSON.
    pub fn export(&self, filter: &QueryFilter, mut out: impl Write) -> Result<(), StoreError> {
        let index = self.index.read().unwrap();
        for pos in index.candidates(filter) {
            let s = &index.records[pos];
            if !filter.matches_header(s.kind, s.timestamp, s.run_id.as_deref(), s.node_id.as_deref()) {
                continue;
            }
            if !filter.predicates.is_empty() {
                let payload: Value = serde_json::from_str(&s.payload).expect("valid JSON");
                if !filter.predicates.iter().all(|p| p.matches(&payload)) {
                    continue;
                }
            }
            out.write_all(&encode(s))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn export_bytes(&self, filter: &QueryFilter) -> Vec<u8> {
        let mut v = Vec::new();
        self.export(filter, &mut v).expect("writing to memory cannot fail");
        v
    }
}

/// Loads framed records; returns the byte length of the intact prefix.
fn load_log(bytes: &[u8], index: &mut Index) -> Result<u64, StoreError> {
    let corrupt = |offset: usize, reason: &str| StoreError::Corrupt {
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if bytes.len() < LOG_MAGIC.len() {
        if LOG_MAGIC.starts_with(bytes) {
            return Ok(0);
        }
        return Err(corrupt(0, "not a store log"));
    }
    if &bytes[..8] != LOG_MAGIC {
        return Err(corrupt(0, "not a store log"));
    }
    let mut pos = 8;
    let mut last_id = 0;
    let mut last_ts = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Ok(pos as u64);
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if bytes.len() - pos - 4 < len {
            return Ok(pos as u64);
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        let rec: Record = serde_json::from_slice(body).map_err(|e| corrupt(pos, &e.to_string()))?;
        if rec.id <= last_id || rec.timestamp < last_ts {
            return Err(corrupt(pos, "record order violated"));
        }
        last_id = rec.id;
        last_ts = rec.timestamp;
        let stored = Stored {
            id: rec.id,
            kind: rec.kind,
            run_id: rec.run_id.map(|r| Index::intern(&index.by_run, r)),
            node_id: rec.node_id.map(|n| Index::intern(&index.by_node, n)),
            timestamp: rec.timestamp,
            payload: rec.payload.to_string().into_boxed_str(),
        };
        index.push(stored);
        pos += 4 + len;
    }
    Ok(pos as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn mem() -> (Store, VirtualClock) {
        let clock = VirtualClock::new(1000);
        (Store::in_memory(Arc::new(clock.clone())), clock)
    }

    #[test]
    fn first_id_is_one() {
        let (s, _) = mem();
        let id = s
            .append(NewRecord::new(RecordKind::RunEvent, json!({"event": "x"})))
            .unwrap();
        assert_eq!(id, 1);
        assert_eq!(s.get(1).unwrap().timestamp, 1000);
    }

    #[test]
    fn kind_field_requirements() {
        let (s, _) = mem();
        assert!(matches!(
            s.append(NewRecord::new(RecordKind::ExperimentData, json!({}))),
            Err(StoreError::MissingRunId)
        ));
        assert!(matches!(
            s.append(NewRecord::new(RecordKind::MonitoringData, json!({}))),
            Err(StoreError::MissingNodeId)
        ));
        assert!(matches!(
            s.append(NewRecord::new(RecordKind::RunEvent, json!([1]))),
            Err(StoreError::NotADocument)
        ));
        assert!(s.is_empty());
    }

    #[test]
    fn concurrent_appends_get_distinct_ids() {
        let (s, _) = mem();
        let s = Arc::new(s);
        let handles: Vec<_> = (0..2)
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || {
                    (0..200)
                        .map(|i| {
                            s.append(NewRecord::new(RecordKind::RunEvent, json!({"t": t, "i": i})))
                                .unwrap()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut ids: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 400);
        for id in ids {
            assert!(s.get(id).is_some());
        }
    }

    #[test]
    fn timestamps_never_go_back() {
        let (s, clock) = mem();
        s.append(NewRecord::new(RecordKind::RunEvent, json!({}))).unwrap();
        clock.set(10);
        s.append(NewRecord::new(RecordKind::RunEvent, json!({}))).unwrap();
        assert_eq!(s.get(2).unwrap().timestamp, 1000);
    }

    #[test]
    fn filter_by_node_and_kind() {
        let (s, _) = mem();
        for n in ["n7", "n8", "n7"] {
            s.append(NewRecord::new(RecordKind::MonitoringData, json!({"up": true})).node(n))
                .unwrap();
            s.append(NewRecord::new(RecordKind::ExperimentData, json!({})).run("r1").node(n))
                .unwrap();
        }
        let got = s.query(&QueryFilter::new().kind(RecordKind::MonitoringData).node("n7"));
        assert_eq!(got.iter().map(|r| r.id).collect::<Vec<_>>(), [1, 5]);
        assert_eq!(s.query(&QueryFilter::new()).len(), 6);
    }

    #[test]
    fn export_is_deterministic() {
        let (s, _) = mem();
        assert!(s.export_bytes(&QueryFilter::new()).is_empty());
        s.append(NewRecord::new(RecordKind::RunEvent, json!({"b": 1, "a": [1.5, null]})))
            .unwrap();
        let a = s.export_bytes(&QueryFilter::new());
        let b = s.export_bytes(&QueryFilter::new());
        assert_eq!(a, b);
        assert_eq!(
            String::from_utf8(a).unwrap(),
            "{\"id\":1,\"kind\":\"run_event\",\"timestamp\":1000,\"payload\":{\"a\":[1.5,null],\"b\":1}}\n"
        );
    }

    #[test]
    fn log_roundtrip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.log");
        let clock: Arc<dyn Clock> = Arc::new(VirtualClock::new(5));
        {
            let s = Store::open(&path, clock.clone(), SyncPolicy::OsBuffered).unwrap();
            s.append(NewRecord::new(RecordKind::RunEvent, json!({"i": 1}))).unwrap();
            s.append(NewRecord::new(RecordKind::RunEvent, json!({"i": 2}))).unwrap();
        }
        let len = std::fs::metadata(&path).unwrap().len();
        // simulate a crash in the middle of a third append
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(&100u32.to_le_bytes()).unwrap();
            f.write_all(b"{\"id\":3").unwrap();
        }
        let s = Store::open(&path, clock.clone(), SyncPolicy::OsBuffered).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), len);
        assert_eq!(s.append(NewRecord::new(RecordKind::RunEvent, json!({}))).unwrap(), 3);
        drop(s);
        let s = Store::open(&path, clock, SyncPolicy::Always).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get(2).unwrap().payload, json!({"i": 2}));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(matches!(
            Store::open(&path, Arc::new(SystemClock), SyncPolicy::OsBuffered),
            Err(StoreError::Corrupt { offset: 0, .. })
        ));
    }

    #[test]
    fn import_preserves_records() {
        let (s, clock) = mem();
        s.append(NewRecord::new(RecordKind::RunEvent, json!({"i": 1}))).unwrap();
        clock.set(2000);
        s.append(NewRecord::new(RecordKind::ExperimentData, json!({"v": 2})).run("r"))
            .unwrap();
        let bytes = s.export_bytes(&QueryFilter::new());
        let t = Store::import(&bytes[..], Arc::new(SystemClock)).unwrap();
        assert_eq!(t.query(&QueryFilter::new()), s.query(&QueryFilter::new()));
        assert_eq!(t.export_bytes(&QueryFilter::new()), bytes);

        let bad = b"{\"id\":2,\"kind\":\"run_event\",\"timestamp\":1,\"payload\":{}}\n{\"id\":1,\"kind\":\"run_event\",\"timestamp\":1,\"payload\":{}}\n";
        assert!(matches!(
            Store::import(&bad[..], Arc::new(SystemClock)),
            Err(StoreError::Import { line: 2, .. })
        ));
    }
}
