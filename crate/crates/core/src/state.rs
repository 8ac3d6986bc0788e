//! Versioned world state with multi-version concurrency control.
//!
//! Every committed value carries the coordinates of the transaction that
//! wrote it: `(block height, transaction index)`. Handlers simulate against
//! an immutable snapshot and record what they read at which version; at
//! commit time the validator replays those read sets against current state
//! and marks a transaction Invalid if anything moved underneath it. Reads of
//! absent keys are recorded too, so a concurrent create invalidates a
//! transaction that decided based on the key's absence.
//!
//! Persistence is an append-only batch log behind the [`Backend`] trait. The
//! file backend checksums each record and truncates a torn tail on recovery,
//! so a crash mid-write loses at most the unfinished batch (which the block
//! chain still holds and can replay).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read as IoRead, Seek, SeekFrom, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto;

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("invalid state key: {0}")]
    BadKey(String),
    #[error("state log corrupt: {0}")]
    Corrupt(String),
    #[error("state log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("commit height {got} does not follow committed height {current}")]
    HeightMismatch { current: u64, got: u64 },
}

/// The four top-level key spaces. Decision keys are special: handlers write
/// them under the placeholder id `<object_id>` and commit expands that to
/// `<object_id>:<height>:<tx_index>`, giving every decision record a unique,
/// position-derived key without the handler knowing its position in advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    Subject,
    Resource,
    Policy,
    Decision,
}

impl Namespace {
    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Subject => "subject",
            Namespace::Resource => "resource",
            Namespace::Policy => "policy",
            Namespace::Decision => "decision",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subject" => Some(Namespace::Subject),
            "resource" => Some(Namespace::Resource),
            "policy" => Some(Namespace::Policy),
            "decision" => Some(Namespace::Decision),
            _ => None,
        }
    }
}

/// A namespaced state key, rendered as `namespace:id`. Entity ids never
/// contain `:`, which keeps the rendering unambiguous and leaves room for
/// the composite decision ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey {
    pub namespace: Namespace,
    pub id: String,
}

fn check_entity_id(id: &str) -> Result<(), StateError> {
    if id.is_empty() {
        return Err(StateError::BadKey("entity id must be non-empty".into()));
    }
    if id.contains(':') {
        return Err(StateError::BadKey(format!("entity id '{id}' must not contain ':'")));
    }
    Ok(())
}

impl StateKey {
    pub fn subject(id: &str) -> Result<Self, StateError> {
        check_entity_id(id)?;
        Ok(Self { namespace: Namespace::Subject, id: id.to_string() })
    }

    pub fn resource(id: &str) -> Result<Self, StateError> {
        check_entity_id(id)?;
        Ok(Self { namespace: Namespace::Resource, id: id.to_string() })
    }

    pub fn policy(id: &str) -> Result<Self, StateError> {
        check_entity_id(id)?;
        Ok(Self { namespace: Namespace::Policy, id: id.to_string() })
    }

    /// Placeholder decision key; commit appends `:<height>:<tx_index>`.
    pub fn decision(object_id: &str) -> Result<Self, StateError> {
        check_entity_id(object_id)?;
        Ok(Self { namespace: Namespace::Decision, id: object_id.to_string() })
    }

    pub fn render(&self) -> String {
        format!("{}:{}", self.namespace.as_str(), self.id)
    }

    pub fn parse(s: &str) -> Result<Self, StateError> {
        let (ns, id) = s
            .split_once(':')
            .ok_or_else(|| StateError::BadKey(format!("'{s}' has no namespace")))?;
        let namespace =
            Namespace::parse(ns).ok_or_else(|| StateError::BadKey(format!("unknown namespace '{ns}'")))?;
        if id.is_empty() {
            return Err(StateError::BadKey(format!("'{s}' has an empty id")));
        }
        Ok(Self { namespace, id: id.to_string() })
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

/// The commit coordinates of a write: which block, which transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub height: u64,
    pub tx_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteValue {
    Put(Vec<u8>),
    Delete,
}

/// What a simulated transaction read (with the versions it saw, `None` for
/// absent keys) and what it intends to write. Two endorsers agreeing on a
/// transaction means their encodings of this are byte-identical.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReadWriteSet {
    pub reads: Vec<(StateKey, Option<Version>)>,
    pub writes: Vec<(StateKey, WriteValue)>,
}

impl ReadWriteSet {
    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.reads.len() as u32);
        for (key, version) in &self.reads {
            w.str(&key.render());
            match version {
                None => {
                    w.u8(0);
                }
                Some(v) => {
                    w.u8(1);
                    w.u64(v.height);
                    w.u32(v.tx_index);
                }
            }
        }
        w.u32(self.writes.len() as u32);
        for (key, value) in &self.writes {
            w.str(&key.render());
            match value {
                WriteValue::Delete => {
                    w.u8(0);
                }
                WriteValue::Put(bytes) => {
                    w.u8(1);
                    w.bytes(bytes);
                }
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let set = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(set)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let mut set = ReadWriteSet::default();
        let n_reads = r.u32()?;
        for _ in 0..n_reads {
            let key = read_key(r)?;
            let version = match r.u8()? {
                0 => None,
                1 => Some(Version { height: r.u64()?, tx_index: r.u32()? }),
                tag => return Err(CodecError::BadTag { tag, at: r.pos() - 1 }),
            };
            set.reads.push((key, version));
        }
        let n_writes = r.u32()?;
        for _ in 0..n_writes {
            let key = read_key(r)?;
            let value = match r.u8()? {
                0 => WriteValue::Delete,
                1 => WriteValue::Put(r.bytes()?),
                tag => return Err(CodecError::BadTag { tag, at: r.pos() - 1 }),
            };
            set.writes.push((key, value));
        }
        Ok(set)
    }
}

fn read_key(r: &mut Reader<'_>) -> Result<StateKey, CodecError> {
    let at = r.pos();
    let rendered = r.str()?;
    StateKey::parse(&rendered).map_err(|_| CodecError::BadTag { tag: 0, at })
}

/// A committed value and the version that wrote it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedValue {
    pub version: Version,
    pub value: Vec<u8>,
}

/// An immutable view of world state as of one block height. Cheap to clone;
/// handlers and endorsers simulate against the same snapshot so their reads
/// agree byte for byte.
#[derive(Debug, Clone)]
pub struct Snapshot {
    map: Arc<BTreeMap<StateKey, VersionedValue>>,
    height: u64,
}

impl Snapshot {
    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn get(&self, key: &StateKey) -> Option<&VersionedValue> {
        self.map.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &VersionedValue)> {
        self.map.iter()
    }
}

/// One batch as persisted: the block height and every write the validator
/// let through, with decision keys already expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedBatch {
    pub height: u64,
    pub entries: Vec<(StateKey, u32, WriteValue)>,
}

impl AppliedBatch {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.height);
        w.u32(self.entries.len() as u32);
        for (key, tx_index, value) in &self.entries {
            w.str(&key.render());
            w.u32(*tx_index);
            match value {
                WriteValue::Delete => {
                    w.u8(0);
                }
                WriteValue::Put(bytes) => {
                    w.u8(1);
                    w.bytes(bytes);
                }
            }
        }
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let height = r.u64()?;
        // Key length prefix, tx index, and op tag: 9 bytes per entry at
        // minimum.
        let count = r.count(9)?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let key = read_key(&mut r)?;
            let tx_index = r.u32()?;
            let value = match r.u8()? {
                0 => WriteValue::Delete,
                1 => WriteValue::Put(r.bytes()?),
                tag => return Err(CodecError::BadTag { tag, at: r.pos() - 1 }),
            };
            entries.push((key, tx_index, value));
        }
        r.expect_end()?;
        Ok(Self { height, entries })
    }
}

/// Where applied batches go. Implementations must persist `append` before
/// returning so a later `load` (possibly in a new process) replays every
/// batch that was acknowledged.
pub trait Backend: Send + Sync {
    fn append(&mut self, batch: &AppliedBatch) -> Result<(), StateError>;
    fn load(&mut self) -> Result<Vec<AppliedBatch>, StateError>;
}

/// Keeps nothing; a store on this backend is rebuilt from the block chain.
#[derive(Default)]
pub struct MemoryBackend;

impl Backend for MemoryBackend {
    fn append(&mut self, _batch: &AppliedBatch) -> Result<(), StateError> {
        Ok(())
    }

    fn load(&mut self) -> Result<Vec<AppliedBatch>, StateError> {
        Ok(Vec::new())
    }
}

const STATE_LOG_MAGIC: &[u8; 4] = b"ABST";
const STATE_LOG_VERSION: u32 = 1;

/// Append-only log of applied batches. Record framing is
/// `u32 body length | 8-byte checksum | body`, checksum being the first 8
/// bytes of SHA-256 over the body. Recovery reads records until the first
/// torn or corrupt one and truncates the file there.
pub struct FileBackend {
    file: File,
}

impl FileBackend {
    pub fn open(path: &Path) -> Result<Self, StateError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        if file.metadata()?.len() == 0 {
            file.write_all(STATE_LOG_MAGIC)?;
            file.write_all(&STATE_LOG_VERSION.to_be_bytes())?;
            file.sync_data()?;
        }
        Ok(Self { file })
    }
}

fn checksum(body: &[u8]) -> [u8; 8] {
    let digest = crypto::sha256(body);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

impl Backend for FileBackend {
    fn append(&mut self, batch: &AppliedBatch) -> Result<(), StateError> {
        let body = batch.encode();
        let mut framed = Vec::with_capacity(body.len() + 12);
        framed.extend_from_slice(&(body.len() as u32).to_be_bytes());
        framed.extend_from_slice(&checksum(&body));
        framed.extend_from_slice(&body);
        self.file.seek(SeekFrom::End(0))?;
        self.file.write_all(&framed)?;
        self.file.sync_data()?;
        Ok(())
    }

    fn load(&mut self) -> Result<Vec<AppliedBatch>, StateError> {
        self.file.seek(SeekFrom::Start(0))?;
        let mut raw = Vec::new();
        self.file.read_to_end(&mut raw)?;
        if raw.len() < 8 {
            return Err(StateError::Corrupt("state log shorter than its header".into()));
        }
        if &raw[0..4] != STATE_LOG_MAGIC {
            return Err(StateError::Corrupt("bad state log magic".into()));
        }
        let version = u32::from_be_bytes(raw[4..8].try_into().unwrap());
        if version != STATE_LOG_VERSION {
            return Err(StateError::Corrupt(format!("unsupported state log version {version}")));
        }

        let mut batches = Vec::new();
        let mut pos = 8usize;
        let mut good_end = pos;
        while pos + 12 <= raw.len() {
            let len = u32::from_be_bytes(raw[pos..pos + 4].try_into().unwrap()) as usize;
            let Some(end) = pos.checked_add(12).and_then(|p| p.checked_add(len)) else {
                break;
            };
            if end > raw.len() {
                break;
            }
            let stored_sum = &raw[pos + 4..pos + 12];
            let body = &raw[pos + 12..end];
            if checksum(body) != stored_sum {
                break;
            }
            match AppliedBatch::decode(body) {
                Ok(batch) => batches.push(batch),
                Err(_) => break,
            }
            pos = end;
            good_end = end;
        }
        if good_end < raw.len() {
            // A torn or corrupt tail: drop it so the next append starts clean.
            self.file.set_len(good_end as u64)?;
            self.file.sync_data()?;
        }
        Ok(batches)
    }
}

/// The mutable world state of one node.
pub struct Store {
    map: Arc<BTreeMap<StateKey, VersionedValue>>,
    height: u64,
    backend: Box<dyn Backend>,
}

impl Store {
    /// A store that forgets on drop; used by tests and by nodes that rebuild
    /// from their ledger.
    pub fn in_memory() -> Self {
        Self::open(Box::new(MemoryBackend)).expect("memory backend cannot fail")
    }

    pub fn open(mut backend: Box<dyn Backend>) -> Result<Self, StateError> {
        let batches = backend.load()?;
        let mut map = BTreeMap::new();
        let mut height = 0u64;
        for batch in batches {
            if batch.height != height + 1 {
                return Err(StateError::Corrupt(format!(
                    "state log jumps from height {height} to {}",
                    batch.height
                )));
            }
            for (key, tx_index, value) in batch.entries {
                apply_entry(&mut map, key, Version { height: batch.height, tx_index }, value);
            }
            height = batch.height;
        }
        Ok(Self { map: Arc::new(map), height, backend })
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { map: Arc::clone(&self.map), height: self.height }
    }

    pub fn get(&self, key: &StateKey) -> Option<&VersionedValue> {
        self.map.get(key)
    }

    /// Decide each transaction's fate against current state. A transaction
    /// is Valid iff every recorded read still matches the committed version
    /// (absence included) and no earlier Valid transaction in this same
    /// batch wrote a key it read.
    pub fn validate(&self, rwsets: &[ReadWriteSet]) -> Vec<bool> {
        let mut dirty: HashSet<&StateKey> = HashSet::new();
        let mut validity = Vec::with_capacity(rwsets.len());
        for set in rwsets {
            let ok = set.reads.iter().all(|(key, version)| {
                !dirty.contains(key) && self.map.get(key).map(|vv| vv.version) == *version
            });
            if ok {
                for (key, _) in &set.writes {
                    dirty.insert(key);
                }
            }
            validity.push(ok);
        }
        validity
    }

    /// Persist and apply the writes of every Valid transaction in block
    /// `height`. The caller passes the validity vector produced by
    /// [`Store::validate`] (or replayed from the chain after a restart);
    /// writes of Invalid transactions are dropped. Decision placeholder keys
    /// are expanded here.
    pub fn apply(
        &mut self,
        height: u64,
        rwsets: &[ReadWriteSet],
        validity: &[bool],
    ) -> Result<(), StateError> {
        assert_eq!(rwsets.len(), validity.len(), "one validity flag per transaction");
        if height != self.height + 1 {
            return Err(StateError::HeightMismatch { current: self.height, got: height });
        }
        let mut entries = Vec::new();
        for (index, set) in rwsets.iter().enumerate() {
            if !validity[index] {
                continue;
            }
            let tx_index = index as u32;
            for (key, value) in &set.writes {
                let key = expand_decision_key(key, height, tx_index);
                entries.push((key, tx_index, value.clone()));
            }
        }
        let batch = AppliedBatch { height, entries };
        self.backend.append(&batch)?;
        let map = Arc::make_mut(&mut self.map);
        for (key, tx_index, value) in batch.entries {
            apply_entry(map, key, Version { height, tx_index }, value);
        }
        self.height = height;
        Ok(())
    }

    /// Validate and commit in one step.
    pub fn validate_and_commit(
        &mut self,
        height: u64,
        rwsets: &[ReadWriteSet],
    ) -> Result<Vec<bool>, StateError> {
        let validity = self.validate(rwsets);
        self.apply(height, rwsets, &validity)?;
        Ok(validity)
    }
}

fn apply_entry(
    map: &mut BTreeMap<StateKey, VersionedValue>,
    key: StateKey,
    version: Version,
    value: WriteValue,
) {
    match value {
        WriteValue::Put(bytes) => {
            map.insert(key, VersionedValue { version, value: bytes });
        }
        WriteValue::Delete => {
            map.remove(&key);
        }
    }
}

/// `decision:<oid>` becomes `decision:<oid>:<height>:<tx_index>`. Other
/// namespaces pass through untouched.
pub fn expand_decision_key(key: &StateKey, height: u64, tx_index: u32) -> StateKey {
    match key.namespace {
        Namespace::Decision => StateKey {
            namespace: Namespace::Decision,
            id: format!("{}:{}:{}", key.id, height, tx_index),
        },
        _ => key.clone(),
    }
}

/// Records reads with first-read-wins version capture and buffers writes.
/// A transaction sees its own writes without generating read entries, so
/// re-simulation by another endorser over the same snapshot produces the
/// identical set.
pub struct TxSimulator {
    snapshot: Snapshot,
    reads: Vec<(StateKey, Option<Version>)>,
    seen: HashSet<StateKey>,
    writes: IndexMap<StateKey, WriteValue>,
}

impl TxSimulator {
    pub fn new(snapshot: Snapshot) -> Self {
        Self { snapshot, reads: Vec::new(), seen: HashSet::new(), writes: IndexMap::new() }
    }

    pub fn get_state(&mut self, key: &StateKey) -> Option<Vec<u8>> {
        if let Some(buffered) = self.writes.get(key) {
            return match buffered {
                WriteValue::Put(bytes) => Some(bytes.clone()),
                WriteValue::Delete => None,
            };
        }
        let found = self.snapshot.get(key);
        if self.seen.insert(key.clone()) {
            self.reads.push((key.clone(), found.map(|vv| vv.version)));
        }
        found.map(|vv| vv.value.clone())
    }

    pub fn put_state(&mut self, key: StateKey, value: Vec<u8>) {
        self.writes.insert(key, WriteValue::Put(value));
    }

    pub fn delete_state(&mut self, key: StateKey) {
        self.writes.insert(key, WriteValue::Delete);
    }

    pub fn into_rwset(self) -> ReadWriteSet {
        ReadWriteSet {
            reads: self.reads,
            writes: self.writes.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sk(s: &str) -> StateKey {
        StateKey::parse(s).unwrap()
    }

    fn put(store: &mut Store, height: u64, key: &str, value: &[u8]) {
        let set = ReadWriteSet {
            reads: vec![],
            writes: vec![(sk(key), WriteValue::Put(value.to_vec()))],
        };
        store.validate_and_commit(height, &[set]).unwrap();
    }

    #[test]
    fn keys_render_and_parse() {
        let key = StateKey::subject("s001").unwrap();
        assert_eq!(key.render(), "subject:s001");
        assert_eq!(StateKey::parse("subject:s001").unwrap(), key);
        assert!(StateKey::subject("a:b").is_err());
        assert!(StateKey::subject("").is_err());
        assert!(StateKey::parse("mystery:x").is_err());
        let d = sk("decision:r001:5:2");
        assert_eq!(d.namespace, Namespace::Decision);
        assert_eq!(d.id, "r001:5:2");
    }

    #[test]
    fn rwset_roundtrips() {
        let set = ReadWriteSet {
            reads: vec![
                (sk("subject:s001"), Some(Version { height: 3, tx_index: 7 })),
                (sk("policy:p1"), None),
            ],
            writes: vec![
                (sk("resource:r001"), WriteValue::Put(b"v".to_vec())),
                (sk("subject:gone"), WriteValue::Delete),
            ],
        };
        let decoded = ReadWriteSet::decode(&set.encode()).unwrap();
        assert_eq!(decoded, set);
    }

    #[test]
    fn simulator_records_first_read_only() {
        let mut store = Store::in_memory();
        put(&mut store, 1, "subject:s001", b"one");

        let mut sim = TxSimulator::new(store.snapshot());
        assert_eq!(sim.get_state(&sk("subject:s001")), Some(b"one".to_vec()));
        sim.put_state(sk("subject:s001"), b"two".to_vec());
        assert_eq!(sim.get_state(&sk("subject:s001")), Some(b"two".to_vec()));
        let set = sim.into_rwset();
        assert_eq!(set.reads.len(), 1);
        assert_eq!(set.reads[0].1, Some(Version { height: 1, tx_index: 0 }));
    }

    #[test]
    fn simulator_sees_own_writes_without_reading() {
        let mut sim = TxSimulator::new(Store::in_memory().snapshot());
        sim.put_state(sk("policy:p1"), b"doc".to_vec());
        assert_eq!(sim.get_state(&sk("policy:p1")), Some(b"doc".to_vec()));
        sim.delete_state(sk("policy:p1"));
        assert_eq!(sim.get_state(&sk("policy:p1")), None);
        let set = sim.into_rwset();
        assert!(set.reads.is_empty());
        assert_eq!(set.writes.len(), 1);
        assert_eq!(set.writes[0].1, WriteValue::Delete);
    }

    #[test]
    fn stale_read_is_invalid() {
        let mut store = Store::in_memory();
        put(&mut store, 1, "subject:s001", b"one");
        let stale = ReadWriteSet {
            reads: vec![(sk("subject:s001"), Some(Version { height: 1, tx_index: 0 }))],
            writes: vec![(sk("subject:s001"), WriteValue::Put(b"x".to_vec()))],
        };
        put(&mut store, 2, "subject:s001", b"two");
        assert_eq!(store.validate(&[stale]), vec![false]);
    }

    #[test]
    fn phantom_read_is_invalid_once_key_appears() {
        let mut store = Store::in_memory();
        let phantom = ReadWriteSet {
            reads: vec![(sk("policy:p1"), None)],
            writes: vec![(sk("policy:p1"), WriteValue::Put(b"new".to_vec()))],
        };
        assert_eq!(store.validate(std::slice::from_ref(&phantom)), vec![true]);
        put(&mut store, 1, "policy:p1", b"already");
        assert_eq!(store.validate(&[phantom]), vec![false]);
    }

    #[test]
    fn within_block_conflict_invalidates_later_reader() {
        let mut store = Store::in_memory();
        put(&mut store, 1, "subject:s001", b"one");
        let v1 = Version { height: 1, tx_index: 0 };
        let writer = ReadWriteSet {
            reads: vec![(sk("subject:s001"), Some(v1))],
            writes: vec![(sk("subject:s001"), WriteValue::Put(b"two".to_vec()))],
        };
        let reader = ReadWriteSet {
            reads: vec![(sk("subject:s001"), Some(v1))],
            writes: vec![(sk("resource:r1"), WriteValue::Put(b"r".to_vec()))],
        };
        let blind = ReadWriteSet {
            reads: vec![],
            writes: vec![(sk("subject:s001"), WriteValue::Put(b"three".to_vec()))],
        };
        let validity = store.validate(&[writer, reader, blind]);
        assert_eq!(validity, vec![true, false, true]);
    }

    #[test]
    fn invalid_tx_writes_are_dropped() {
        let mut store = Store::in_memory();
        put(&mut store, 1, "subject:s001", b"one");
        let bad = ReadWriteSet {
            reads: vec![(sk("subject:s001"), None)],
            writes: vec![(sk("subject:new"), WriteValue::Put(b"x".to_vec()))],
        };
        let validity = store.validate_and_commit(2, &[bad]).unwrap();
        assert_eq!(validity, vec![false]);
        assert!(store.get(&sk("subject:new")).is_none());
        assert_eq!(store.height(), 2);
    }

    #[test]
    fn versions_carry_block_and_tx_coordinates() {
        let mut store = Store::in_memory();
        let a = ReadWriteSet { reads: vec![], writes: vec![(sk("subject:a"), WriteValue::Put(b"a".to_vec()))] };
        let b = ReadWriteSet { reads: vec![], writes: vec![(sk("subject:b"), WriteValue::Put(b"b".to_vec()))] };
        store.validate_and_commit(1, &[a, b]).unwrap();
        assert_eq!(store.get(&sk("subject:a")).unwrap().version, Version { height: 1, tx_index: 0 });
        assert_eq!(store.get(&sk("subject:b")).unwrap().version, Version { height: 1, tx_index: 1 });
    }

    #[test]
    fn heights_must_be_contiguous() {
        let mut store = Store::in_memory();
        put(&mut store, 1, "subject:a", b"a");
        let err = store.validate_and_commit(3, &[]).unwrap_err();
        assert!(matches!(err, StateError::HeightMismatch { current: 1, got: 3 }));
    }

    #[test]
    fn snapshots_are_isolated_from_later_commits() {
        let mut store = Store::in_memory();
        put(&mut store, 1, "subject:s001", b"one");
        let snap = store.snapshot();
        put(&mut store, 2, "subject:s001", b"two");
        assert_eq!(snap.get(&sk("subject:s001")).unwrap().value, b"one");
        assert_eq!(store.get(&sk("subject:s001")).unwrap().value, b"two");
    }

    #[test]
    fn decision_keys_expand_at_commit() {
        let mut store = Store::in_memory();
        let set = ReadWriteSet {
            reads: vec![],
            writes: vec![(StateKey::decision("r001").unwrap(), WriteValue::Put(b"d".to_vec()))],
        };
        store.validate_and_commit(1, &[ReadWriteSet::default(), set]).unwrap();
        let expanded = sk("decision:r001:1:1");
        assert_eq!(store.get(&expanded).unwrap().value, b"d");
        assert!(store.get(&sk("decision:r001")).is_none());
    }

    #[test]
    fn file_backend_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.log");
        {
            let mut store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
            put(&mut store, 1, "subject:s001", b"one");
            put(&mut store, 2, "policy:p1", b"doc");
        }
        let store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
        assert_eq!(store.height(), 2);
        assert_eq!(store.get(&sk("subject:s001")).unwrap().value, b"one");
        assert_eq!(store.get(&sk("policy:p1")).unwrap().version, Version { height: 2, tx_index: 0 });
    }

    #[test]
    fn torn_tail_is_truncated_on_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.log");
        {
            let mut store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
            put(&mut store, 1, "subject:s001", b"one");
            put(&mut store, 2, "subject:s001", b"two");
        }
        // Chop three bytes off the final record, as if the process died
        // mid-write.
        let full = std::fs::metadata(&path).unwrap().len();
        let file = OpenOptions::new().write(true).open(&path).unwrap();
        file.set_len(full - 3).unwrap();
        drop(file);

        let store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
        assert_eq!(store.height(), 1);
        assert_eq!(store.get(&sk("subject:s001")).unwrap().value, b"one");

        // The truncated log accepts new appends cleanly.
        let mut store = store;
        put(&mut store, 2, "subject:s001", b"two again");
        drop(store);
        let store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
        assert_eq!(store.get(&sk("subject:s001")).unwrap().value, b"two again");
    }

    #[test]
    fn corrupt_middle_record_stops_replay_at_the_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.log");
        let second_start;
        {
            let mut store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
            put(&mut store, 1, "subject:s001", b"one");
            second_start = std::fs::metadata(&path).unwrap().len();
            put(&mut store, 2, "subject:s001", b"two");
        }
        let mut raw = std::fs::read(&path).unwrap();
        let flip = second_start as usize + 14;
        raw[flip] ^= 0xff;
        std::fs::write(&path, &raw).unwrap();

        let store = Store::open(Box::new(FileBackend::open(&path).unwrap())).unwrap();
        assert_eq!(store.height(), 1);
    }

    // An independent serial re-execution: walk transactions in order against
    // a plain map, deciding validity by direct version comparison.
    pub(crate) fn serial_oracle(
        batches: &[(u64, Vec<ReadWriteSet>)],
    ) -> (Vec<Vec<bool>>, BTreeMap<StateKey, VersionedValue>) {
        let mut map: BTreeMap<StateKey, VersionedValue> = BTreeMap::new();
        let mut all_validity = Vec::new();
        for (height, sets) in batches {
            let mut validity = Vec::new();
            let mut staged: Vec<(StateKey, u32, WriteValue)> = Vec::new();
            let mut staged_keys: HashSet<StateKey> = HashSet::new();
            for (index, set) in sets.iter().enumerate() {
                let mut ok = true;
                for (key, seen) in &set.reads {
                    let current = map.get(key).map(|vv| vv.version);
                    if staged_keys.contains(key) || current != *seen {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    for (key, value) in &set.writes {
                        staged_keys.insert(key.clone());
                        let expanded = expand_decision_key(key, *height, index as u32);
                        staged.push((expanded, index as u32, value.clone()));
                    }
                }
                validity.push(ok);
            }
            for (key, tx_index, value) in staged {
                apply_entry(&mut map, key, Version { height: *height, tx_index }, value);
            }
            all_validity.push(validity);
        }
        (all_validity, map)
    }

    prop_compose! {
        fn arb_rwset(n_keys: usize)(
            read_picks in proptest::collection::btree_set(0..n_keys, 0..4),
            stale in proptest::collection::vec(any::<bool>(), 4),
            write_picks in proptest::collection::btree_set(0..n_keys, 0..4),
            deletes in proptest::collection::vec(any::<bool>(), 4),
            payload in 0u8..255,
        ) -> (Vec<(usize, bool)>, Vec<(usize, bool)>, u8) {
            let reads = read_picks.into_iter().zip(stale).collect();
            let writes = write_picks.into_iter().zip(deletes).collect();
            (reads, writes, payload)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn validator_matches_serial_oracle(
            specs in proptest::collection::vec(
                proptest::collection::vec(arb_rwset(6), 0..6), 1..8)
        ) {
            let keys: Vec<StateKey> = (0..6).map(|i| sk(&format!("subject:k{i}"))).collect();
            let mut store = Store::in_memory();
            let mut batches = Vec::new();
            for (b, batch_spec) in specs.iter().enumerate() {
                let height = (b + 1) as u64;
                let snap = store.snapshot();
                let sets: Vec<ReadWriteSet> = batch_spec.iter().map(|(reads, writes, payload)| {
                    let reads = reads.iter().map(|(k, stale)| {
                        let true_version = snap.get(&keys[*k]).map(|vv| vv.version);
                        // A "stale" pick claims a version that may disagree
                        // with reality; validation must catch it.
                        let claimed = if *stale {
                            Some(Version { height: 999, tx_index: 0 })
                        } else {
                            true_version
                        };
                        (keys[*k].clone(), claimed)
                    }).collect();
                    let writes = writes.iter().map(|(k, del)| {
                        let value = if *del {
                            WriteValue::Delete
                        } else {
                            WriteValue::Put(vec![*payload, *k as u8])
                        };
                        (keys[*k].clone(), value)
                    }).collect();
                    ReadWriteSet { reads, writes }
                }).collect();
                let validity = store.validate_and_commit(height, &sets).unwrap();
                batches.push((height, sets, validity));
            }

            let oracle_input: Vec<(u64, Vec<ReadWriteSet>)> =
                batches.iter().map(|(h, s, _)| (*h, s.clone())).collect();
            let (oracle_validity, oracle_map) = serial_oracle(&oracle_input);

            for ((_, _, got), want) in batches.iter().zip(&oracle_validity) {
                prop_assert_eq!(got, want);
            }
            let final_map: BTreeMap<StateKey, VersionedValue> =
                store.snapshot().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            prop_assert_eq!(final_map, oracle_map);
        }
    }
}
