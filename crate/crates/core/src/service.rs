//! The node itself: request handlers, multi-organization endorsement,
//! ordering, block commit, and crash recovery, plus the line-delimited
//! JSON gateway that fronts it all over a Unix socket.
//!
//! Every state-changing request follows the same path. The gateway
//! simulates it once per organization against a shared snapshot, compares
//! the resulting read-write sets byte for byte, signs the transaction,
//! and hands it to the ordering service. The committer thread turns cut
//! batches into blocks: duplicates are dropped, reads are validated
//! against current versions, the block is appended to the chain first,
//! and only then is state updated and the caller woken. On restart the
//! chain is the authority: any suffix missing from the state log is
//! replayed from the blocks before the node accepts traffic.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write as _};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical;
use crate::codec::Writer;
use crate::crypto::{self, Hash, OrgKeypair};
use crate::ledger::{
    Approval, BlockStore, FileBlockStore, Ledger, MemoryBlockStore, Transaction, TxType,
    VerifyOutcome,
};
use crate::ordering::{BlockCutter, Cluster, LogEntry};
use crate::policy::{
    self, AttributeRecord, AttributeValue, Decision, EntityKind, EvaluationContext, Outcome,
    PolicyError,
};
use crate::state::{
    Backend, FileBackend, MemoryBackend, Namespace, ReadWriteSet, Snapshot, StateError, StateKey,
    Store, TxSimulator,
};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("insufficient approvals: {got} distinct valid signatures, {need} required")]
    InsufficientApprovals { got: usize, need: usize },
    #[error("bad signature: {0}")]
    BadSignature(String),
    #[error("endorsement mismatch: {0}")]
    EndorsementMismatch(String),
    #[error("read conflict: transaction invalidated {0} times by concurrent writes")]
    ReadConflict(u32),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl ServiceError {
    /// Stable machine-readable code for the gateway protocol.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Schema(_) => "SCHEMA_VIOLATION",
            ServiceError::InsufficientApprovals { .. } => "INSUFFICIENT_APPROVALS",
            ServiceError::BadSignature(_) => "BAD_SIGNATURE",
            ServiceError::EndorsementMismatch(_) => "ENDORSEMENT_MISMATCH",
            ServiceError::ReadConflict(_) => "MVCC_READ_CONFLICT",
            ServiceError::Unauthorized(_) => "UNAUTHORIZED",
            ServiceError::NotFound(_) => "NOT_FOUND",
            ServiceError::BadRequest(_) => "BAD_REQUEST",
            ServiceError::Unavailable(_) => "UNAVAILABLE",
            ServiceError::Storage(_) => "STORAGE_FAILURE",
            ServiceError::Config(_) => "CONFIG_ERROR",
        }
    }
}

fn schema(e: PolicyError) -> ServiceError {
    // Unwrap the variant payload so the service prefix is not doubled.
    match e {
        PolicyError::MalformedDocument(m) | PolicyError::SchemaViolation(m) => {
            ServiceError::Schema(m)
        }
    }
}

fn schema_key(e: StateError) -> ServiceError {
    ServiceError::Schema(e.to_string())
}

fn storage<E: std::fmt::Display>(e: E) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrdererMode {
    Solo,
    Raft,
}

impl OrdererMode {
    pub fn name(self) -> &'static str {
        match self {
            OrdererMode::Solo => "solo",
            OrdererMode::Raft => "raft",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrdererConfig {
    #[serde(default = "defaults::mode")]
    pub mode: OrdererMode,
    /// Replica count for raft mode; ignored by solo.
    #[serde(default = "defaults::cluster_size")]
    pub cluster_size: u32,
    #[serde(default = "defaults::batch_max_count")]
    pub batch_max_count: usize,
    #[serde(default = "defaults::batch_timeout_ms")]
    pub batch_timeout_ms: u64,
    #[serde(default = "defaults::election_timeout_ms")]
    pub election_timeout_ms: (u64, u64),
    #[serde(default = "defaults::heartbeat_ms")]
    pub heartbeat_ms: u64,
    /// Seeds the raft cluster's randomized election timers.
    #[serde(default = "defaults::seed")]
    pub seed: u64,
}

impl Default for OrdererConfig {
    fn default() -> Self {
        Self {
            mode: defaults::mode(),
            cluster_size: defaults::cluster_size(),
            batch_max_count: defaults::batch_max_count(),
            batch_timeout_ms: defaults::batch_timeout_ms(),
            election_timeout_ms: defaults::election_timeout_ms(),
            heartbeat_ms: defaults::heartbeat_ms(),
            seed: defaults::seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndorsementConfig {
    /// Distinct organization approvals required before a policy write is
    /// admitted to ordering.
    #[serde(default = "defaults::threshold")]
    pub threshold: usize,
}

impl Default for EndorsementConfig {
    fn default() -> Self {
        Self { threshold: defaults::threshold() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrgConfig {
    pub org_id: String,
    /// Hex-encoded Ed25519 public key.
    pub public_key: String,
    /// Hex-encoded signing seed; present on nodes that endorse for this
    /// organization, absent on verify-only configs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret_key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeConfig {
    #[serde(default)]
    pub orderer: OrdererConfig,
    #[serde(default)]
    pub endorsement: EndorsementConfig,
    pub orgs: Vec<OrgConfig>,
    /// Client ids allowed to read audit trails. Empty means unrestricted.
    #[serde(default)]
    pub audit_clients: Vec<String>,
    #[serde(default = "defaults::commit_timeout_ms")]
    pub commit_timeout_ms: u64,
}

mod defaults {
    use super::OrdererMode;

    pub fn mode() -> OrdererMode {
        OrdererMode::Solo
    }
    pub fn cluster_size() -> u32 {
        3
    }
    pub fn batch_max_count() -> usize {
        500
    }
    pub fn batch_timeout_ms() -> u64 {
        250
    }
    pub fn election_timeout_ms() -> (u64, u64) {
        (150, 300)
    }
    pub fn heartbeat_ms() -> u64 {
        50
    }
    pub fn seed() -> u64 {
        0x0abac5
    }
    pub fn threshold() -> usize {
        1
    }
    pub fn commit_timeout_ms() -> u64 {
        10_000
    }
}

impl NodeConfig {
    /// A self-contained configuration for tests and local benchmarks:
    /// `org_count` organizations with deterministic keys, all of which this
    /// node endorses for.
    pub fn dev(org_count: usize, threshold: usize) -> (Self, Vec<OrgKeypair>) {
        let keys: Vec<OrgKeypair> = (1..=org_count)
            .map(|i| {
                let seed = crypto::sha256(format!("dev-org-{i}").as_bytes());
                OrgKeypair::from_seed(&format!("org{i}"), seed)
            })
            .collect();
        let orgs = keys
            .iter()
            .map(|k| OrgConfig {
                org_id: k.org_id.clone(),
                public_key: k.public_hex(),
                secret_key: Some(k.secret_hex()),
            })
            .collect();
        let config = Self {
            orderer: OrdererConfig { batch_timeout_ms: 25, ..OrdererConfig::default() },
            endorsement: EndorsementConfig { threshold },
            orgs,
            audit_clients: Vec::new(),
            commit_timeout_ms: defaults::commit_timeout_ms(),
        };
        (config, keys)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("cannot parse {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ServiceError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n")
            .map_err(|e| ServiceError::Config(format!("cannot write {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.orgs.is_empty() {
            return Err(ServiceError::Config("at least one organization is required".into()));
        }
        let mut seen = HashSet::new();
        for org in &self.orgs {
            if !seen.insert(org.org_id.as_str()) {
                return Err(ServiceError::Config(format!(
                    "organization '{}' is listed twice",
                    org.org_id
                )));
            }
        }
        if self.endorsement.threshold == 0 || self.endorsement.threshold > self.orgs.len() {
            return Err(ServiceError::Config(format!(
                "approval threshold {} is outside 1..={}",
                self.endorsement.threshold,
                self.orgs.len()
            )));
        }
        if self.orderer.mode == OrdererMode::Raft && self.orderer.cluster_size == 0 {
            return Err(ServiceError::Config("raft cluster size must be at least 1".into()));
        }
        let (lo, hi) = self.orderer.election_timeout_ms;
        if lo == 0 || hi < lo {
            return Err(ServiceError::Config("election timeout range is empty".into()));
        }
        Ok(())
    }

    /// The keypairs this node endorses with: every configured organization
    /// that carries a secret key. At least one is required to execute
    /// transactions.
    pub fn signing_keys(&self) -> Result<Vec<OrgKeypair>, ServiceError> {
        let mut keys = Vec::new();
        for org in &self.orgs {
            if let Some(secret) = &org.secret_key {
                let pair = OrgKeypair::from_secret_hex(&org.org_id, secret).map_err(|_| {
                    ServiceError::Config(format!("organization '{}' has a malformed secret key", org.org_id))
                })?;
                if pair.public_hex() != org.public_key {
                    return Err(ServiceError::Config(format!(
                        "organization '{}' secret does not match its public key",
                        org.org_id
                    )));
                }
                keys.push(pair);
            }
        }
        if keys.is_empty() {
            return Err(ServiceError::Config(
                "no organization carries a secret key; this node cannot endorse".into(),
            ));
        }
        Ok(keys)
    }
}

// ---------------------------------------------------------------------------
// Request simulation
// ---------------------------------------------------------------------------

/// What one organization's simulation of a request produced.
pub(crate) struct SimRun {
    tx_type: TxType,
    payload: Vec<u8>,
    rwset: ReadWriteSet,
    response: Value,
}

/// The digest organizations sign to approve a policy document: the SHA-256
/// of its canonical JSON serialization.
pub fn policy_approval_digest(document: &Value) -> Hash {
    crypto::sha256(&canonical::to_canonical_bytes(document))
}

fn kind_name(kind: EntityKind) -> &'static str {
    match kind {
        EntityKind::Subject => "subject",
        EntityKind::Object => "resource",
    }
}

fn parse_stored_record(bytes: &[u8], kind: EntityKind) -> Result<AttributeRecord, ServiceError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ServiceError::Storage(format!("stored {} record is not JSON: {e}", kind_name(kind))))?;
    policy::parse_attributes_value(&value, kind)
        .map_err(|e| ServiceError::Storage(format!("stored {} record is unreadable: {e}", kind_name(kind))))
}

fn parse_stored_policy(bytes: &[u8]) -> Result<policy::Policy, ServiceError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ServiceError::Storage(format!("stored policy is not JSON: {e}")))?;
    policy::parse_policy_value(&value)
        .map_err(|e| ServiceError::Storage(format!("stored policy is unreadable: {e}")))
}

pub(crate) struct CheckRequest<'a> {
    pub(crate) request_id: &'a str,
    pub(crate) subject_id: &'a str,
    pub(crate) object_id: &'a str,
    pub(crate) clock: DateTime<Utc>,
}

/// Simulate an access decision. Reads the subject, the object, and the
/// policy named by the object's `policyID` attribute; a missing piece
/// denies with a reason instead of failing, so the attempt itself is
/// still recorded on the chain. The written decision record binds the
/// outcome to the exact attribute bytes it was computed from.
pub(crate) fn simulate_check_access(
    snapshot: Snapshot,
    req: &CheckRequest<'_>,
) -> Result<SimRun, ServiceError> {
    let subject_key = StateKey::subject(req.subject_id).map_err(schema_key)?;
    let object_key = StateKey::resource(req.object_id).map_err(schema_key)?;
    let mut sim = TxSimulator::new(snapshot);
    let subject_bytes = sim.get_state(&subject_key);
    let object_bytes = sim.get_state(&object_key);

    let subject = match &subject_bytes {
        Some(bytes) => Some(parse_stored_record(bytes, EntityKind::Subject)?),
        None => None,
    };
    let object = match &object_bytes {
        Some(bytes) => Some(parse_stored_record(bytes, EntityKind::Object)?),
        None => None,
    };

    let mut policy_id: Option<String> = None;
    let mut decision = Decision { outcome: Outcome::Deny, failed_rules: Vec::new() };
    let mut reason: Option<&'static str> = None;

    match (&subject, &object) {
        (None, _) => reason = Some("subject_not_found"),
        (_, None) => reason = Some("object_not_found"),
        (Some(subject), Some(object)) => {
            let binding = match object.attributes.get("policyID") {
                Some(AttributeValue::Text(pid)) => {
                    policy_id = Some(pid.clone());
                    StateKey::policy(pid).ok().and_then(|key| sim.get_state(&key))
                }
                _ => None,
            };
            match binding {
                None => reason = Some("policy_not_found"),
                Some(bytes) => {
                    let pol = parse_stored_policy(&bytes)?;
                    let ctx = EvaluationContext { clock: req.clock };
                    decision = policy::evaluate(&pol, subject, object, &ctx);
                    if decision.outcome == Outcome::Deny {
                        reason = Some("rules_failed");
                    }
                }
            }
        }
    }

    let outcome = if reason.is_none() { "Permit" } else { "Deny" };
    // Stored policies are canonicalized, so rule order is not meaningful
    // here; report failures in sorted order to give the record a stable,
    // documented shape.
    decision.failed_rules.sort();
    let attributes_hash = {
        let mut w = Writer::new();
        w.bytes(subject_bytes.as_deref().unwrap_or(&[]));
        w.bytes(object_bytes.as_deref().unwrap_or(&[]));
        hex::encode(crypto::sha256(&w.finish()))
    };

    let record = json!({
        "request_id": req.request_id,
        "subjectID": req.subject_id,
        "resourceID": req.object_id,
        "policyID": policy_id,
        "outcome": outcome,
        "failed_rules": decision.failed_rules,
        "reason": reason,
        "clock": policy::format_datetime(&req.clock),
        "attributes_hash": attributes_hash,
    });
    sim.put_state(
        StateKey::decision(req.object_id).map_err(schema_key)?,
        canonical::to_canonical_bytes(&record),
    );

    let payload = canonical::to_canonical_bytes(&json!({
        "clock": policy::format_datetime(&req.clock),
        "request_id": req.request_id,
        "resourceID": req.object_id,
        "subjectID": req.subject_id,
    }));
    Ok(SimRun { tx_type: TxType::PolicyDecision, payload, rwset: sim.into_rwset(), response: record })
}

/// Simulate an attribute upsert: a blind write of the record's canonical
/// form, so concurrent updates to the same entity never conflict and the
/// last one in block order wins.
pub(crate) fn simulate_record_attributes(
    snapshot: Snapshot,
    kind: EntityKind,
    document: &Value,
) -> Result<SimRun, ServiceError> {
    let record = policy::parse_attributes_value(document, kind).map_err(schema)?;
    let key = match kind {
        EntityKind::Subject => StateKey::subject(&record.entity_id),
        EntityKind::Object => StateKey::resource(&record.entity_id),
    }
    .map_err(schema_key)?;
    let value = canonical::to_canonical_bytes(&record.to_json());
    let mut sim = TxSimulator::new(snapshot);
    sim.put_state(key.clone(), value.clone());
    let response = json!({
        "entity_id": record.entity_id,
        "kind": kind_name(kind),
        "key": key.render(),
    });
    Ok(SimRun { tx_type: TxType::RecordAttributes, payload: value, rwset: sim.into_rwset(), response })
}

/// Simulate a policy write. Reads the policy key first, both to pick the
/// transaction type (submit or update) and so concurrent policy writes
/// collide under validation. Approvals ride in the payload where any
/// reader of the chain can re-verify them.
fn simulate_propose_policy(
    snapshot: Snapshot,
    document: &Value,
    approvals: &[(String, Vec<u8>)],
) -> Result<SimRun, ServiceError> {
    let parsed = policy::parse_policy_value(document).map_err(schema)?;
    let key = StateKey::policy(&parsed.policy_id).map_err(schema_key)?;
    let mut sim = TxSimulator::new(snapshot);
    let action = if sim.get_state(&key).is_some() { "update" } else { "submit" };
    let tx_type = if action == "update" { TxType::PolicyUpdate } else { TxType::PolicySubmit };
    sim.put_state(key.clone(), canonical::to_canonical_bytes(document));

    let approvals_json: Vec<Value> = approvals
        .iter()
        .map(|(org_id, sig)| json!({"org_id": org_id, "signature": hex::encode(sig)}))
        .collect();
    let payload = canonical::to_canonical_bytes(&json!({
        "approvals": approvals_json,
        "policy": document,
    }));
    let response = json!({
        "policy_id": parsed.policy_id,
        "action": action,
        "key": key.render(),
    });
    Ok(SimRun { tx_type, payload, rwset: sim.into_rwset(), response })
}

// ---------------------------------------------------------------------------
// Ordering and commit threads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct CommitOutcome {
    pub(crate) height: u64,
    pub(crate) tx_index: u32,
    pub(crate) valid: bool,
    /// When the committer confirmed the block; the far end of a latency
    /// measurement.
    pub(crate) at: Instant,
}

type CommittedIndex = HashMap<Hash, (u64, u32, bool)>;

fn solo_loop(rx: Receiver<Transaction>, mut cutter: BlockCutter, out: SyncSender<Vec<Transaction>>) {
    let start = Instant::now();
    let now_ms = |start: &Instant| start.elapsed().as_millis() as u64;
    loop {
        let wait = match cutter.deadline() {
            Some(deadline) => Duration::from_millis(deadline.saturating_sub(now_ms(&start))),
            // Nothing pending: park until a submission arrives.
            None => Duration::from_secs(3600),
        };
        match rx.recv_timeout(wait) {
            Ok(tx) => {
                if let Some(batch) = cutter.submit(now_ms(&start), tx) {
                    if out.send(batch).is_err() {
                        return;
                    }
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if let Some(batch) = cutter.poll(now_ms(&start)) {
                    if out.send(batch).is_err() {
                        return;
                    }
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                if let Some(batch) = cutter.flush() {
                    let _ = out.send(batch);
                }
                return;
            }
        }
    }
}

fn batch_fingerprint(entry: &LogEntry<Vec<Transaction>>) -> u64 {
    match &entry.payload {
        None => u64::MAX,
        Some(txs) => {
            let mut cat = Vec::with_capacity(txs.len() * 32);
            for tx in txs {
                cat.extend_from_slice(&tx.tx_id);
            }
            let digest = crypto::sha256(&cat);
            u64::from_be_bytes(digest[..8].try_into().unwrap())
        }
    }
}

/// Drive a replicated ordering cluster in real time. Virtual simulation
/// time tracks the wall clock while the service runs; once the submission
/// channel closes, time free-runs so in-flight batches finish committing
/// before the thread exits.
fn raft_loop(
    rx: Receiver<Transaction>,
    mut cutter: BlockCutter,
    out: SyncSender<Vec<Transaction>>,
    config: OrdererConfig,
) {
    let mut cluster: Cluster<Vec<Transaction>> = Cluster::new(
        config.cluster_size.max(1),
        config.seed,
        config.election_timeout_ms,
        config.heartbeat_ms,
        (1, 3),
        0.0,
        batch_fingerprint,
    );
    let start = Instant::now();
    let mut pending: VecDeque<Vec<Transaction>> = VecDeque::new();
    let mut accepted: u64 = 0;
    let mut drained: u64 = 0;
    let mut virtual_now: u64 = 0;
    let mut disconnected = false;
    loop {
        if disconnected {
            virtual_now += 10;
        } else {
            virtual_now = virtual_now.max(start.elapsed().as_millis() as u64);
        }
        if !disconnected {
            loop {
                match rx.try_recv() {
                    Ok(tx) => {
                        if let Some(batch) = cutter.submit(virtual_now, tx) {
                            pending.push_back(batch);
                        }
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => {
                        disconnected = true;
                        if let Some(batch) = cutter.flush() {
                            pending.push_back(batch);
                        }
                        break;
                    }
                }
            }
            if let Some(batch) = cutter.poll(virtual_now) {
                pending.push_back(batch);
            }
        }
        while let Some(front) = pending.front() {
            if cluster.submit(front.clone()).is_some() {
                accepted += 1;
                pending.pop_front();
            } else {
                // No leader yet; retry after the cluster advances.
                break;
            }
        }
        if cluster.run_until(virtual_now).is_err() {
            // A replication safety check tripped with no induced faults.
            // Nothing sound can be committed past this point.
            return;
        }
        for batch in cluster.drain_committed() {
            drained += 1;
            if out.send(batch).is_err() {
                return;
            }
        }
        if disconnected && pending.is_empty() && drained >= accepted {
            return;
        }
        if !disconnected {
            thread::sleep(Duration::from_millis(2));
        }
    }
}

fn committer_loop(
    rx: Receiver<Vec<Transaction>>,
    state: Arc<RwLock<Store>>,
    ledger: Arc<Mutex<Ledger>>,
    committed: Arc<Mutex<CommittedIndex>>,
    waiters: Arc<Mutex<HashMap<Hash, SyncSender<CommitOutcome>>>>,
) {
    for batch in rx {
        // A transaction id commits at most once, no matter how often the
        // ordering layer delivers it.
        let txs: Vec<Transaction> = {
            let seen = committed.lock().unwrap();
            let mut in_batch = HashSet::new();
            batch
                .into_iter()
                .filter(|tx| !seen.contains_key(&tx.tx_id) && in_batch.insert(tx.tx_id))
                .collect()
        };
        if txs.is_empty() {
            continue;
        }
        let rwsets: Vec<ReadWriteSet> = txs.iter().map(|tx| tx.rwset.clone()).collect();

        let mut state_guard = state.write().unwrap();
        let validity = state_guard.validate(&rwsets);
        let block = {
            let mut ledger_guard = ledger.lock().unwrap();
            match ledger_guard.append(txs.clone(), validity.clone()) {
                Ok(block) => block,
                Err(e) => {
                    eprintln!("fatal: block append failed, commits stop: {e}");
                    return;
                }
            }
        };
        if let Err(e) = state_guard.apply(block.header.height, &rwsets, &validity) {
            eprintln!("fatal: state apply failed at height {}: {e}", block.header.height);
            return;
        }
        drop(state_guard);

        let height = block.header.height;
        {
            let mut seen = committed.lock().unwrap();
            for (i, tx) in txs.iter().enumerate() {
                seen.insert(tx.tx_id, (height, i as u32, validity[i]));
            }
        }
        let confirmed_at = Instant::now();
        let mut waiting = waiters.lock().unwrap();
        for (i, tx) in txs.iter().enumerate() {
            if let Some(notify) = waiting.remove(&tx.tx_id) {
                let _ = notify.send(CommitOutcome {
                    height,
                    tx_index: i as u32,
                    valid: validity[i],
                    at: confirmed_at,
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The service
// ---------------------------------------------------------------------------

pub struct Service {
    config: NodeConfig,
    orgs: Vec<OrgKeypair>,
    state: Arc<RwLock<Store>>,
    ledger: Arc<Mutex<Ledger>>,
    committed: Arc<Mutex<CommittedIndex>>,
    waiters: Arc<Mutex<HashMap<Hash, SyncSender<CommitOutcome>>>>,
    submit: Option<Sender<Transaction>>,
    threads: Vec<JoinHandle<()>>,
    commit_timeout: Duration,
}

impl Service {
    /// Open (or create) a node rooted at `data_dir`: blocks under
    /// `blocks/`, the state log as `state.log`.
    pub fn open(data_dir: &Path, config: NodeConfig) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(data_dir).map_err(storage)?;
        let backend = FileBackend::open(&data_dir.join("state.log")).map_err(storage)?;
        let blocks = FileBlockStore::open(&data_dir.join("blocks")).map_err(storage)?;
        Self::start(Box::new(backend), Box::new(blocks), config)
    }

    /// A node with no durable storage; for tests and benchmarks.
    pub fn open_in_memory(config: NodeConfig) -> Result<Self, ServiceError> {
        Self::start(Box::new(MemoryBackend), Box::new(MemoryBlockStore::new()), config)
    }

    fn start(
        backend: Box<dyn Backend>,
        blocks: Box<dyn BlockStore>,
        config: NodeConfig,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let orgs = config.signing_keys()?;
        let mut store = Store::open(backend).map_err(storage)?;
        let ledger = Ledger::open(blocks).map_err(storage)?;

        // The chain is the authority. Replay any suffix the state log is
        // missing, and rebuild the committed-id index for deduplication.
        let state_height = store.height();
        if state_height > ledger.height() {
            return Err(ServiceError::Storage(format!(
                "state log reaches height {state_height} but the chain stops at {}",
                ledger.height()
            )));
        }
        let mut committed = CommittedIndex::new();
        for height in 1..=ledger.height() {
            let block = ledger.block(height).map_err(storage)?;
            if height > state_height {
                let rwsets: Vec<ReadWriteSet> = block.txs.iter().map(|tx| tx.rwset.clone()).collect();
                store.apply(height, &rwsets, &block.validity).map_err(storage)?;
            }
            for (i, tx) in block.txs.iter().enumerate() {
                committed.insert(tx.tx_id, (height, i as u32, block.validity[i]));
            }
        }

        let state = Arc::new(RwLock::new(store));
        let ledger = Arc::new(Mutex::new(ledger));
        let committed = Arc::new(Mutex::new(committed));
        let waiters: Arc<Mutex<HashMap<Hash, SyncSender<CommitOutcome>>>> =
            Arc::new(Mutex::new(HashMap::new()));

        let (submit_tx, submit_rx) = mpsc::channel::<Transaction>();
        let (batch_tx, batch_rx) = mpsc::sync_channel::<Vec<Transaction>>(64);
        let cutter = BlockCutter::new(config.orderer.batch_max_count, config.orderer.batch_timeout_ms);

        let mut threads = Vec::new();
        match config.orderer.mode {
            OrdererMode::Solo => {
                threads.push(
                    thread::Builder::new()
                        .name("orderer".into())
                        .spawn(move || solo_loop(submit_rx, cutter, batch_tx))
                        .map_err(storage)?,
                );
            }
            OrdererMode::Raft => {
                let orderer_config = config.orderer.clone();
                threads.push(
                    thread::Builder::new()
                        .name("orderer".into())
                        .spawn(move || raft_loop(submit_rx, cutter, batch_tx, orderer_config))
                        .map_err(storage)?,
                );
            }
        }
        {
            let state = Arc::clone(&state);
            let ledger = Arc::clone(&ledger);
            let committed = Arc::clone(&committed);
            let waiters = Arc::clone(&waiters);
            threads.push(
                thread::Builder::new()
                    .name("committer".into())
                    .spawn(move || committer_loop(batch_rx, state, ledger, committed, waiters))
                    .map_err(storage)?,
            );
        }

        let commit_timeout = Duration::from_millis(config.commit_timeout_ms);
        Ok(Self {
            config,
            orgs,
            state,
            ledger,
            committed,
            waiters,
            submit: Some(submit_tx),
            threads,
            commit_timeout,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    /// Flush pending batches and stop all threads. Dropping does the same.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.submit.take();
        for handle in self.threads.drain(..) {
            let _ = handle.join();
        }
    }

    // -- execution pipeline -------------------------------------------------

    /// Run one simulation per endorsing organization against a shared
    /// snapshot and require byte-identical results before anything is
    /// signed. Divergence means the handler read something outside the
    /// snapshot and must not reach the chain.
    fn endorse<F>(&self, simulate: F, client_id: &str) -> Result<(Transaction, Value), ServiceError>
    where
        F: Fn(Snapshot) -> Result<SimRun, ServiceError>,
    {
        let snapshot = self.state.read().unwrap().snapshot();
        let runs: Vec<SimRun> = self
            .orgs
            .iter()
            .map(|_| simulate(snapshot.clone()))
            .collect::<Result<_, _>>()?;
        self.endorse_runs(runs, Utc::now().timestamp(), client_id)
    }

    fn endorse_runs(
        &self,
        runs: Vec<SimRun>,
        timestamp: i64,
        client_id: &str,
    ) -> Result<(Transaction, Value), ServiceError> {
        let mut iter = runs.into_iter();
        let first = iter.next().expect("at least one endorsing organization");
        let reference = first.rwset.encode();
        for (i, run) in iter.enumerate() {
            if run.rwset.encode() != reference || run.payload != first.payload {
                return Err(ServiceError::EndorsementMismatch(format!(
                    "organization '{}' produced a divergent read-write set",
                    self.orgs[i + 1].org_id
                )));
            }
        }
        let unsigned = Transaction::seal(
            first.tx_type,
            first.payload,
            first.rwset,
            Vec::new(),
            timestamp,
            client_id.to_string(),
        );
        let digest = unsigned.endorsement_digest();
        let approvals: Vec<Approval> = self
            .orgs
            .iter()
            .map(|key| Approval { org_id: key.org_id.clone(), signature: key.sign(&digest) })
            .collect();
        let tx = Transaction::seal(
            unsigned.tx_type,
            unsigned.payload,
            unsigned.rwset,
            approvals,
            timestamp,
            client_id.to_string(),
        );
        Ok((tx, first.response))
    }

    /// Hand a sealed transaction to ordering and get a channel that will
    /// carry its commit confirmation. A transaction id that already
    /// committed is confirmed immediately instead of being re-ordered.
    fn enqueue(&self, tx: Transaction) -> Result<Receiver<CommitOutcome>, ServiceError> {
        let tx_id = tx.tx_id;
        let (notify, confirmed) = mpsc::sync_channel(1);
        if let Some(&(height, tx_index, valid)) = self.committed.lock().unwrap().get(&tx_id) {
            let _ = notify.send(CommitOutcome { height, tx_index, valid, at: Instant::now() });
            return Ok(confirmed);
        }
        self.waiters.lock().unwrap().insert(tx_id, notify);
        let submit = self
            .submit
            .as_ref()
            .ok_or_else(|| ServiceError::Unavailable("service is shutting down".into()))?;
        if submit.send(tx).is_err() {
            self.waiters.lock().unwrap().remove(&tx_id);
            return Err(ServiceError::Unavailable("ordering service has stopped".into()));
        }
        Ok(confirmed)
    }

    /// Endorse and submit without blocking on commit; the load harness
    /// paces submissions independently of confirmations through this.
    pub(crate) fn begin<F>(
        &self,
        client_id: &str,
        simulate: F,
    ) -> Result<(Hash, Receiver<CommitOutcome>), ServiceError>
    where
        F: Fn(Snapshot) -> Result<SimRun, ServiceError>,
    {
        let (tx, _response) = self.endorse(&simulate, client_id)?;
        let tx_id = tx.tx_id;
        let confirmed = self.enqueue(tx)?;
        Ok((tx_id, confirmed))
    }

    fn submit_and_wait(&self, tx: Transaction) -> Result<CommitOutcome, ServiceError> {
        let tx_id = tx.tx_id;
        let confirmed = self.enqueue(tx)?;
        match confirmed.recv_timeout(self.commit_timeout) {
            Ok(outcome) => Ok(outcome),
            Err(_) => {
                self.waiters.lock().unwrap().remove(&tx_id);
                // The commit may have raced the timeout.
                if let Some(&(height, tx_index, valid)) = self.committed.lock().unwrap().get(&tx_id) {
                    return Ok(CommitOutcome { height, tx_index, valid, at: Instant::now() });
                }
                Err(ServiceError::Unavailable("transaction was not committed within the timeout".into()))
            }
        }
    }

    /// Simulate, endorse, order, and wait for commit. A transaction marked
    /// Invalid by version validation is re-executed against a fresh
    /// snapshot a bounded number of times.
    fn execute<F>(&self, client_id: &str, simulate: F) -> Result<Value, ServiceError>
    where
        F: Fn(Snapshot) -> Result<SimRun, ServiceError>,
    {
        const ATTEMPTS: u32 = 3;
        for _ in 0..ATTEMPTS {
            let (tx, response) = self.endorse(&simulate, client_id)?;
            let tx_id = tx.tx_id;
            let outcome = self.submit_and_wait(tx)?;
            if outcome.valid {
                return Ok(annotate(response, tx_id, &outcome));
            }
        }
        Err(ServiceError::ReadConflict(ATTEMPTS))
    }

    // -- operations ----------------------------------------------------------

    /// Evaluate an access request and record the decision on the chain.
    /// Deny is a successful outcome, not an error; the caller distinguishes
    /// by the `outcome` field.
    pub fn check_access(
        &self,
        client_id: &str,
        request_id: &str,
        subject_id: &str,
        object_id: &str,
        clock: Option<DateTime<Utc>>,
    ) -> Result<Value, ServiceError> {
        let clock = clock.unwrap_or_else(now_second);
        let req = CheckRequest { request_id, subject_id, object_id, clock };
        self.execute(client_id, |snapshot| simulate_check_access(snapshot, &req))
    }

    pub fn record_attributes(
        &self,
        client_id: &str,
        kind: EntityKind,
        document: &Value,
    ) -> Result<Value, ServiceError> {
        self.execute(client_id, |snapshot| simulate_record_attributes(snapshot, kind, document))
    }

    /// Admit a policy write. Approval signatures are verified against the
    /// organization registry before anything is simulated; an
    /// under-approved document never reaches ordering.
    pub fn propose_policy(
        &self,
        client_id: &str,
        document: &Value,
        approvals: &[(String, Vec<u8>)],
    ) -> Result<Value, ServiceError> {
        policy::parse_policy_value(document).map_err(schema)?;
        let digest = policy_approval_digest(document);
        let mut admitted: Vec<(String, Vec<u8>)> = Vec::new();
        for (org_id, signature) in approvals {
            let org = self
                .config
                .orgs
                .iter()
                .find(|o| o.org_id == *org_id)
                .ok_or_else(|| ServiceError::BadSignature(format!("unknown organization '{org_id}'")))?;
            crypto::verify_signature(&org.public_key, &digest, signature).map_err(|_| {
                ServiceError::BadSignature(format!("approval by '{org_id}' does not verify"))
            })?;
            if !admitted.iter().any(|(o, _)| o == org_id) {
                admitted.push((org_id.clone(), signature.clone()));
            }
        }
        let need = self.config.endorsement.threshold;
        if admitted.len() < need {
            return Err(ServiceError::InsufficientApprovals { got: admitted.len(), need });
        }
        admitted.sort_by(|a, b| a.0.cmp(&b.0));
        self.execute(client_id, |snapshot| simulate_propose_policy(snapshot, document, &admitted))
    }

    /// Reconstruct every decision recorded against an object, oldest
    /// first, straight from the chain.
    pub fn query_audit(&self, client_id: &str, object_id: &str) -> Result<Value, ServiceError> {
        if !self.config.audit_clients.is_empty()
            && !self.config.audit_clients.iter().any(|c| c == client_id)
        {
            return Err(ServiceError::Unauthorized(format!(
                "client '{client_id}' may not read audit trails"
            )));
        }
        let entries = {
            let ledger = self.ledger.lock().unwrap();
            ledger.decision_records(object_id).map_err(storage)?
        };
        let mut decisions = Vec::with_capacity(entries.len());
        for entry in entries {
            let record = match &entry.value {
                crate::state::WriteValue::Put(bytes) => serde_json::from_slice::<Value>(bytes)
                    .map_err(|e| ServiceError::Storage(format!("stored decision is not JSON: {e}")))?,
                crate::state::WriteValue::Delete => continue,
            };
            decisions.push(json!({
                "height": entry.height,
                "tx_index": entry.tx_index,
                "tx_id": hex::encode(entry.tx_id),
                "record": record,
            }));
        }
        Ok(json!({"resourceID": object_id, "decisions": decisions}))
    }

    /// Read one key from current state. Never touches the chain.
    pub fn query_data(&self, key: &str) -> Result<Value, ServiceError> {
        let key = StateKey::parse(key).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let snapshot = self.state.read().unwrap().snapshot();
        let versioned = snapshot
            .get(&key)
            .ok_or_else(|| ServiceError::NotFound(format!("no value at '{}'", key.render())))?;
        Ok(json!({
            "key": key.render(),
            "value": value_as_json(&versioned.value),
            "version": {"height": versioned.version.height, "tx_index": versioned.version.tx_index},
        }))
    }

    /// Every committed write to `key`, oldest first. Decision keys match
    /// by their object prefix since each commit gets a unique suffix.
    pub fn key_history(&self, key: &str) -> Result<Value, ServiceError> {
        let key = StateKey::parse(key).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let entries = {
            let ledger = self.ledger.lock().unwrap();
            let wanted = key.clone();
            ledger
                .history(move |candidate| {
                    candidate == &wanted
                        || (wanted.namespace == Namespace::Decision
                            && candidate.namespace == Namespace::Decision
                            && candidate.id.starts_with(&format!("{}:", wanted.id)))
                })
                .map_err(storage)?
        };
        let history: Vec<Value> = entries
            .iter()
            .map(|entry| {
                let (op, value) = match &entry.value {
                    crate::state::WriteValue::Put(bytes) => ("put", value_as_json(bytes)),
                    crate::state::WriteValue::Delete => ("delete", Value::Null),
                };
                json!({
                    "height": entry.height,
                    "tx_index": entry.tx_index,
                    "tx_id": hex::encode(entry.tx_id),
                    "tx_type": entry.tx_type.name(),
                    "timestamp": entry.timestamp,
                    "key": entry.key.render(),
                    "op": op,
                    "value": value,
                })
            })
            .collect();
        Ok(json!({"key": key.render(), "history": history}))
    }

    /// Dump current state, key-ordered, with versions.
    pub fn export_state(&self) -> Value {
        let snapshot = self.state.read().unwrap().snapshot();
        let entries: Vec<Value> = snapshot
            .iter()
            .map(|(key, versioned)| {
                json!({
                    "key": key.render(),
                    "value": value_as_json(&versioned.value),
                    "version": {"height": versioned.version.height, "tx_index": versioned.version.tx_index},
                })
            })
            .collect();
        json!({"height": snapshot.height(), "entries": entries})
    }

    pub fn status(&self) -> Value {
        let chain_height = self.ledger.lock().unwrap().height();
        let state_height = self.state.read().unwrap().height();
        let committed = self.committed.lock().unwrap().len();
        json!({
            "chain_height": chain_height,
            "state_height": state_height,
            "committed_transactions": committed,
            "orderer": self.config.orderer.mode.name(),
            "organizations": self.config.orgs.iter().map(|o| o.org_id.clone()).collect::<Vec<_>>(),
            "approval_threshold": self.config.endorsement.threshold,
        })
    }

    /// Re-hash the whole chain.
    pub fn verify_chain(&self) -> VerifyOutcome {
        self.ledger.lock().unwrap().verify()
    }

    /// Re-verify every signature on the chain against the organization
    /// registry: endorsements on all transactions, and approval thresholds
    /// on effective policy writes.
    pub fn verify_governance(&self) -> Result<GovernanceReport, ServiceError> {
        let ledger = self.ledger.lock().unwrap();
        verify_governance(ledger.store(), &self.config.orgs, self.config.endorsement.threshold)
    }

    // -- protocol dispatch ----------------------------------------------------

    /// Handle one protocol envelope; always yields a response envelope.
    pub fn handle(&self, request: &Value) -> Value {
        let request_id = request
            .get("request_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(fresh_request_id);
        let client_id =
            request.get("client_id").and_then(Value::as_str).unwrap_or("anonymous").to_string();
        let op = request.get("op").and_then(Value::as_str).unwrap_or("").to_string();
        let params = request.get("params").cloned().unwrap_or_else(|| json!({}));
        match self.dispatch(&request_id, &client_id, &op, &params) {
            Ok(result) => json!({"request_id": request_id, "status": "ok", "result": result}),
            Err(e) => json!({
                "request_id": request_id,
                "status": "error",
                "error": {"code": e.code(), "message": e.to_string()},
            }),
        }
    }

    fn dispatch(
        &self,
        request_id: &str,
        client_id: &str,
        op: &str,
        params: &Value,
    ) -> Result<Value, ServiceError> {
        match op {
            "check_access" => {
                let subject_id = param_str(params, "subjectID")?;
                let object_id = param_str(params, "resourceID")?;
                let clock = match params.get("clock") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(policy::parse_datetime(s).map_err(schema)?),
                    Some(other) => {
                        return Err(ServiceError::BadRequest(format!(
                            "parameter 'clock' must be a string, got {other}"
                        )))
                    }
                };
                self.check_access(client_id, request_id, subject_id, object_id, clock)
            }
            "record_attributes" => {
                let kind = match param_str(params, "kind")? {
                    "subject" => EntityKind::Subject,
                    "resource" => EntityKind::Object,
                    other => {
                        return Err(ServiceError::BadRequest(format!(
                            "parameter 'kind' must be 'subject' or 'resource', got '{other}'"
                        )))
                    }
                };
                let document = params
                    .get("document")
                    .ok_or_else(|| ServiceError::BadRequest("missing parameter 'document'".into()))?;
                self.record_attributes(client_id, kind, document)
            }
            "propose_policy" => {
                let document = params
                    .get("document")
                    .ok_or_else(|| ServiceError::BadRequest("missing parameter 'document'".into()))?;
                let approvals_param = params
                    .get("approvals")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ServiceError::BadRequest("missing parameter 'approvals'".into()))?;
                let mut approvals = Vec::with_capacity(approvals_param.len());
                for entry in approvals_param {
                    let org_id = entry
                        .get("org_id")
                        .and_then(Value::as_str)
                        .ok_or_else(|| ServiceError::BadRequest("approval lacks 'org_id'".into()))?;
                    let sig_hex = entry
                        .get("signature")
                        .and_then(Value::as_str)
                        .ok_or_else(|| ServiceError::BadRequest("approval lacks 'signature'".into()))?;
                    let signature = hex::decode(sig_hex).map_err(|_| {
                        ServiceError::BadSignature(format!("approval by '{org_id}' is not hex"))
                    })?;
                    approvals.push((org_id.to_string(), signature));
                }
                self.propose_policy(client_id, document, &approvals)
            }
            "query_audit" => self.query_audit(client_id, param_str(params, "resourceID")?),
            "query_data" => self.query_data(param_str(params, "key")?),
            "query_history" => self.key_history(param_str(params, "key")?),
            "state_export" => Ok(self.export_state()),
            "status" => Ok(self.status()),
            other => Err(ServiceError::BadRequest(format!("unknown operation '{other}'"))),
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop();
    }
}

fn annotate(mut response: Value, tx_id: Hash, outcome: &CommitOutcome) -> Value {
    if let Some(obj) = response.as_object_mut() {
        obj.insert("tx_id".into(), json!(hex::encode(tx_id)));
        obj.insert("height".into(), json!(outcome.height));
        obj.insert("tx_index".into(), json!(outcome.tx_index));
    }
    response
}

fn param_str<'a>(params: &'a Value, name: &str) -> Result<&'a str, ServiceError> {
    params
        .get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| ServiceError::BadRequest(format!("missing string parameter '{name}'")))
}

fn value_as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|_| json!(hex::encode(bytes)))
}

fn fresh_request_id() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

/// The gateway clock: current UTC truncated to whole seconds, matching
/// the resolution of datetime attributes.
fn now_second() -> DateTime<Utc> {
    Utc.timestamp_opt(Utc::now().timestamp(), 0).single().expect("unix seconds in range")
}

// ---------------------------------------------------------------------------
// Chain-wide signature audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GovernanceReport {
    pub blocks: u64,
    pub transactions: u64,
    pub policy_transactions: u64,
}

/// Walk the chain verifying endorsement signatures on every transaction
/// and, for each effective policy write, that its payload carries at
/// least `threshold` distinct valid organization approvals over the
/// canonical policy document. Errors point at the first offender. Takes
/// raw block storage so it runs offline against a data directory too.
pub fn verify_governance(
    store: &dyn BlockStore,
    orgs: &[OrgConfig],
    threshold: usize,
) -> Result<GovernanceReport, ServiceError> {
    let find_org = |org_id: &str| orgs.iter().find(|o| o.org_id == org_id);
    let height_count = store.next_height().saturating_sub(1);
    let mut report =
        GovernanceReport { blocks: height_count, transactions: 0, policy_transactions: 0 };
    for height in 1..=height_count {
        let block = crate::ledger::Block::decode(&store.read_raw(height).map_err(storage)?)
            .map_err(storage)?;
        for (i, tx) in block.txs.iter().enumerate() {
            report.transactions += 1;
            let at = format!("{} (block {height}, index {i})", hex::encode(tx.tx_id));
            if tx.approvals.is_empty() {
                return Err(ServiceError::BadSignature(format!("transaction {at} carries no endorsements")));
            }
            let digest = tx.endorsement_digest();
            for approval in &tx.approvals {
                let org = find_org(&approval.org_id).ok_or_else(|| {
                    ServiceError::BadSignature(format!(
                        "transaction {at} endorsed by unknown organization '{}'",
                        approval.org_id
                    ))
                })?;
                crypto::verify_signature(&org.public_key, &digest, &approval.signature).map_err(|_| {
                    ServiceError::BadSignature(format!(
                        "endorsement by '{}' on transaction {at} does not verify",
                        approval.org_id
                    ))
                })?;
            }
            if !matches!(tx.tx_type, TxType::PolicySubmit | TxType::PolicyUpdate) || !block.validity[i] {
                continue;
            }
            report.policy_transactions += 1;
            let payload: Value = serde_json::from_slice(&tx.payload)
                .map_err(|e| ServiceError::Storage(format!("policy payload in {at} is not JSON: {e}")))?;
            let document = payload
                .get("policy")
                .ok_or_else(|| ServiceError::Storage(format!("policy payload in {at} lacks the document")))?;
            let digest = policy_approval_digest(document);
            let approvals = payload
                .get("approvals")
                .and_then(Value::as_array)
                .ok_or_else(|| ServiceError::Storage(format!("policy payload in {at} lacks approvals")))?;
            let mut distinct = HashSet::new();
            for entry in approvals {
                let org_id = entry.get("org_id").and_then(Value::as_str).unwrap_or("");
                let signature = entry
                    .get("signature")
                    .and_then(Value::as_str)
                    .and_then(|s| hex::decode(s).ok())
                    .ok_or_else(|| {
                        ServiceError::BadSignature(format!("malformed approval in transaction {at}"))
                    })?;
                let org = find_org(org_id).ok_or_else(|| {
                    ServiceError::BadSignature(format!(
                        "policy in {at} approved by unknown organization '{org_id}'"
                    ))
                })?;
                crypto::verify_signature(&org.public_key, &digest, &signature).map_err(|_| {
                    ServiceError::BadSignature(format!(
                        "approval by '{org_id}' on policy in {at} does not verify"
                    ))
                })?;
                distinct.insert(org_id.to_string());
            }
            if distinct.len() < threshold {
                return Err(ServiceError::InsufficientApprovals { got: distinct.len(), need: threshold });
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Socket gateway
// ---------------------------------------------------------------------------

/// A running Unix-socket listener. Stopping (or dropping) unbinds the
/// socket; connections already open finish on their own threads.
pub struct ServerHandle {
    path: PathBuf,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.shutdown.store(true, AtomicOrdering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Serve line-delimited JSON request envelopes over a Unix socket. Each
/// request line yields exactly one response line.
pub fn serve_unix(service: Arc<Service>, path: &Path) -> std::io::Result<ServerHandle> {
    let _ = std::fs::remove_file(path);
    let listener = UnixListener::bind(path)?;
    listener.set_nonblocking(true)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let accept_shutdown = Arc::clone(&shutdown);
    let accept_thread = thread::Builder::new().name("gateway".into()).spawn(move || {
        while !accept_shutdown.load(AtomicOrdering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let service = Arc::clone(&service);
                    let _ = thread::Builder::new()
                        .name("gateway-conn".into())
                        .spawn(move || serve_connection(service, stream));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
    })?;
    Ok(ServerHandle { path: path.to_path_buf(), shutdown, accept_thread: Some(accept_thread) })
}

fn serve_connection(service: Arc<Service>, stream: UnixStream) {
    let _ = stream.set_nonblocking(false);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut writer = stream;
    let reader = BufReader::new(read_half);
    for line in reader.lines() {
        let Ok(line) = line else { return };
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Value>(&line) {
            Ok(request) => service.handle(&request),
            Err(e) => json!({
                "request_id": Value::Null,
                "status": "error",
                "error": {"code": "BAD_REQUEST", "message": format!("request is not JSON: {e}")},
            }),
        };
        if writeln!(writer, "{response}").is_err() || writer.flush().is_err() {
            return;
        }
    }
}
