//! The hash-chained block ledger.
//!
//! Every block header commits to its payload through a Merkle root and to
//! all history through the previous header's hash, so a single flipped bit
//! anywhere in a stored chain surfaces as a verification failure at or below
//! the damaged block. The Merkle leaves cover both the transaction ids and
//! their validity flags: flipping a transaction from Invalid to Valid after
//! the fact is exactly the kind of tampering an audit log must catch, so the
//! flags are under the hash along with the transactions themselves.
//!
//! Verification never trusts in-memory caches. [`Ledger::verify`] re-reads
//! raw bytes from the store and recomputes every hash.

use std::fs::{File, OpenOptions};
use std::io::{Read as IoRead, Seek, SeekFrom, Write as IoWrite};
use std::path::{Path, PathBuf};

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{self, Hash, ZERO_HASH};
use crate::state::{ReadWriteSet, StateKey, WriteValue};

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("block {height} not found")]
    NotFound { height: u64 },
    #[error("block store corrupt at height {height}: {reason}")]
    Corrupt { height: u64, reason: String },
    #[error("block encoding: {0}")]
    Codec(#[from] CodecError),
}

/// What kind of request a transaction carries. The numeric codes are part
/// of the block format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxType {
    RecordAttributes,
    PolicySubmit,
    PolicyUpdate,
    PolicyDecision,
    QueryData,
}

impl TxType {
    pub fn code(self) -> u8 {
        match self {
            TxType::RecordAttributes => 0,
            TxType::PolicySubmit => 1,
            TxType::PolicyUpdate => 2,
            TxType::PolicyDecision => 3,
            TxType::QueryData => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TxType::RecordAttributes),
            1 => Some(TxType::PolicySubmit),
            2 => Some(TxType::PolicyUpdate),
            3 => Some(TxType::PolicyDecision),
            4 => Some(TxType::QueryData),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TxType::RecordAttributes => "record_attributes",
            TxType::PolicySubmit => "policy_submit",
            TxType::PolicyUpdate => "policy_update",
            TxType::PolicyDecision => "policy_decision",
            TxType::QueryData => "query_data",
        }
    }
}

/// One organization's endorsement: an Ed25519 signature over the
/// transaction's endorsement digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Approval {
    pub org_id: String,
    pub signature: Vec<u8>,
}

/// An ordered, endorsed transaction. `tx_id` is the SHA-256 of every other
/// field, so two transactions with the same id are byte-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub tx_id: Hash,
    pub tx_type: TxType,
    pub payload: Vec<u8>,
    pub rwset: ReadWriteSet,
    pub approvals: Vec<Approval>,
    pub timestamp: i64,
    pub client_id: String,
}

impl Transaction {
    /// Build a transaction, computing its id from the other fields.
    pub fn seal(
        tx_type: TxType,
        payload: Vec<u8>,
        rwset: ReadWriteSet,
        approvals: Vec<Approval>,
        timestamp: i64,
        client_id: String,
    ) -> Self {
        let mut tx = Self {
            tx_id: ZERO_HASH,
            tx_type,
            payload,
            rwset,
            approvals,
            timestamp,
            client_id,
        };
        tx.tx_id = crypto::sha256(&tx.body_bytes());
        tx
    }

    fn write_body(&self, w: &mut Writer, include_approvals: bool) {
        w.u8(self.tx_type.code());
        w.bytes(&self.payload);
        w.bytes(&self.rwset.encode());
        if include_approvals {
            w.u32(self.approvals.len() as u32);
            for approval in &self.approvals {
                w.str(&approval.org_id);
                w.bytes(&approval.signature);
            }
        }
        w.i64(self.timestamp);
        w.str(&self.client_id);
    }

    /// Everything except the id; hashing this yields the id.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_body(&mut w, true);
        w.finish()
    }

    /// What organizations sign: the body minus the approvals themselves.
    pub fn endorsement_digest(&self) -> Hash {
        let mut w = Writer::new();
        self.write_body(&mut w, false);
        crypto::sha256(&w.finish())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed32(&self.tx_id);
        self.write_body(&mut w, true);
        w.finish()
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let tx_id = r.fixed32()?;
        let type_at = r.pos();
        let type_code = r.u8()?;
        let tx_type = TxType::from_code(type_code)
            .ok_or(CodecError::BadTag { tag: type_code, at: type_at })?;
        let payload = r.bytes()?;
        let rwset_bytes = r.bytes()?;
        let rwset = ReadWriteSet::decode(&rwset_bytes)?;
        // Each approval is two length-prefixed fields, 8 bytes minimum.
        let n_approvals = r.count(8)?;
        let mut approvals = Vec::with_capacity(n_approvals);
        for _ in 0..n_approvals {
            approvals.push(Approval { org_id: r.str()?, signature: r.bytes()? });
        }
        let timestamp = r.i64()?;
        let client_id = r.str()?;
        Ok(Self { tx_id, tx_type, payload, rwset, approvals, timestamp, client_id })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let tx = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(tx)
    }
}

/// The 72 fixed header bytes: height, previous header hash, data hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub height: u64,
    pub previous_hash: Hash,
    pub data_hash: Hash,
}

impl BlockHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.height);
        w.fixed32(&self.previous_hash);
        w.fixed32(&self.data_hash);
        w.finish()
    }

    /// The hash the next block's `previous_hash` must equal.
    pub fn hash(&self) -> Hash {
        crypto::sha256(&self.encode())
    }
}

/// Merkle root over one leaf per transaction: SHA-256 of the transaction id
/// followed by its validity flag byte.
pub fn data_hash(txs: &[Transaction], validity: &[bool]) -> Hash {
    assert_eq!(txs.len(), validity.len(), "one validity flag per transaction");
    let leaves: Vec<Hash> = txs
        .iter()
        .zip(validity)
        .map(|(tx, valid)| {
            let mut leaf = Vec::with_capacity(33);
            leaf.extend_from_slice(&tx.tx_id);
            leaf.push(u8::from(*valid));
            crypto::sha256(&leaf)
        })
        .collect();
    crypto::merkle_root(&leaves)
}

/// A committed block: ordered transactions plus the validator's verdict on
/// each, all under the header's data hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
    pub validity: Vec<bool>,
}

impl Block {
    pub fn build(height: u64, previous_hash: Hash, txs: Vec<Transaction>, validity: Vec<bool>) -> Self {
        let data_hash = data_hash(&txs, &validity);
        Self {
            header: BlockHeader { height, previous_hash, data_hash },
            txs,
            validity,
        }
    }

    /// Block 0: fixed shape, no transactions, all-zero previous hash.
    pub fn genesis() -> Self {
        Self::build(0, ZERO_HASH, Vec::new(), Vec::new())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.header.height);
        w.fixed32(&self.header.previous_hash);
        w.fixed32(&self.header.data_hash);
        w.u32(self.txs.len() as u32);
        for tx in &self.txs {
            w.bytes(&tx.encode());
        }
        for valid in &self.validity {
            w.u8(u8::from(*valid));
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let height = r.u64()?;
        let previous_hash = r.fixed32()?;
        let data_hash = r.fixed32()?;
        // Each transaction costs a 4-byte length prefix plus a trailing
        // validity byte, so 5 bytes per entry at minimum.
        let count = r.count(5)?;
        let mut txs = Vec::with_capacity(count);
        for _ in 0..count {
            let tx_bytes = r.bytes()?;
            txs.push(Transaction::decode(&tx_bytes)?);
        }
        let mut validity = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos();
            match r.u8()? {
                0 => validity.push(false),
                1 => validity.push(true),
                tag => return Err(CodecError::BadTag { tag, at }),
            }
        }
        r.expect_end()?;
        Ok(Self {
            header: BlockHeader { height, previous_hash, data_hash },
            txs,
            validity,
        })
    }
}

/// Raw block persistence. Implementations serve back exactly the bytes that
/// were appended; all integrity checking happens above, in [`Ledger`].
pub trait BlockStore: Send {
    fn append_raw(&mut self, height: u64, bytes: &[u8]) -> Result<(), LedgerError>;
    fn read_raw(&self, height: u64) -> Result<Vec<u8>, LedgerError>;
    /// Number of readable blocks; heights `0..next_height()` resolve.
    fn next_height(&self) -> u64;
    /// The height where an unreadable trailing region begins, if any.
    fn tail_damage(&self) -> Option<u64>;
    /// Discard the unreadable trailing region after a crash mid-append.
    fn repair_tail(&mut self) -> Result<(), LedgerError>;
}

/// Test-friendly store keeping raw blocks in memory.
#[derive(Default)]
pub struct MemoryBlockStore {
    blocks: Vec<Vec<u8>>,
}

impl MemoryBlockStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Direct byte access so tests can damage a stored block.
    pub fn raw_mut(&mut self, height: u64) -> &mut Vec<u8> {
        &mut self.blocks[height as usize]
    }
}

impl BlockStore for MemoryBlockStore {
    fn append_raw(&mut self, height: u64, bytes: &[u8]) -> Result<(), LedgerError> {
        assert_eq!(height, self.blocks.len() as u64, "blocks append in height order");
        self.blocks.push(bytes.to_vec());
        Ok(())
    }

    fn read_raw(&self, height: u64) -> Result<Vec<u8>, LedgerError> {
        self.blocks
            .get(height as usize)
            .cloned()
            .ok_or(LedgerError::NotFound { height })
    }

    fn next_height(&self) -> u64 {
        self.blocks.len() as u64
    }

    fn tail_damage(&self) -> Option<u64> {
        None
    }

    fn repair_tail(&mut self) -> Result<(), LedgerError> {
        Ok(())
    }
}

const SEGMENT_MAGIC: &[u8; 4] = b"ABLK";
const SEGMENT_VERSION: u32 = 1;
/// Blocks per segment file.
const SEGMENT_BLOCKS: u64 = 1000;

/// Segmented on-disk store: `blocks-NNNNN.seg` files of up to
/// [`SEGMENT_BLOCKS`] records each. See `docs/block-format.md` for the byte
/// layout. Offsets are indexed in memory by scanning at open; a torn or
/// unreadable trailing region is reported, never silently dropped, so a
/// deliberate-tamper check and a crash-recovery path can each decide what to
/// do with it.
pub struct FileBlockStore {
    dir: PathBuf,
    // (segment index, byte offset, length) per block, in height order.
    index: Vec<(u64, u64, u32)>,
    damage: Option<u64>,
}

impl FileBlockStore {
    pub fn open(dir: &Path) -> Result<Self, LedgerError> {
        std::fs::create_dir_all(dir)?;
        let mut store = Self { dir: dir.to_path_buf(), index: Vec::new(), damage: None };
        store.scan()?;
        Ok(store)
    }

    fn segment_path(&self, segment: u64) -> PathBuf {
        self.dir.join(format!("blocks-{segment:05}.seg"))
    }

    fn scan(&mut self) -> Result<(), LedgerError> {
        self.index.clear();
        self.damage = None;
        for segment in 0u64.. {
            let path = self.segment_path(segment);
            if !path.exists() {
                break;
            }
            let raw = std::fs::read(&path)?;
            let first_height = segment * SEGMENT_BLOCKS;
            if raw.len() < 16
                || &raw[0..4] != SEGMENT_MAGIC
                || u32::from_be_bytes(raw[4..8].try_into().unwrap()) != SEGMENT_VERSION
                || u64::from_be_bytes(raw[8..16].try_into().unwrap()) != first_height
            {
                self.damage = Some(first_height);
                return Ok(());
            }
            let mut pos = 16usize;
            let mut height = first_height;
            while pos + 4 <= raw.len() {
                let len = u32::from_be_bytes(raw[pos..pos + 4].try_into().unwrap());
                let end = pos + 4 + len as usize;
                if end > raw.len() {
                    self.damage = Some(height);
                    return Ok(());
                }
                if height != self.index.len() as u64 {
                    self.damage = Some(self.index.len() as u64);
                    return Ok(());
                }
                self.index.push((segment, (pos + 4) as u64, len));
                pos = end;
                height += 1;
            }
            if pos != raw.len() {
                // A few stray bytes that cannot even hold a length prefix.
                self.damage = Some(height);
                return Ok(());
            }
        }
        Ok(())
    }
}

impl BlockStore for FileBlockStore {
    fn append_raw(&mut self, height: u64, bytes: &[u8]) -> Result<(), LedgerError> {
        assert_eq!(height, self.index.len() as u64, "blocks append in height order");
        assert!(self.damage.is_none(), "repair the tail before appending");
        let segment = height / SEGMENT_BLOCKS;
        let path = self.segment_path(segment);
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() == 0 {
            let mut header = Vec::with_capacity(16);
            header.extend_from_slice(SEGMENT_MAGIC);
            header.extend_from_slice(&SEGMENT_VERSION.to_be_bytes());
            header.extend_from_slice(&(segment * SEGMENT_BLOCKS).to_be_bytes());
            file.write_all(&header)?;
        }
        let offset = file.metadata()?.len();
        file.write_all(&(bytes.len() as u32).to_be_bytes())?;
        file.write_all(bytes)?;
        file.sync_data()?;
        self.index.push((segment, offset + 4, bytes.len() as u32));
        Ok(())
    }

    fn read_raw(&self, height: u64) -> Result<Vec<u8>, LedgerError> {
        let Some((segment, offset, len)) = self.index.get(height as usize).copied() else {
            return Err(LedgerError::NotFound { height });
        };
        let mut file = File::open(self.segment_path(segment))?;
        file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len as usize];
        file.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn next_height(&self) -> u64 {
        self.index.len() as u64
    }

    fn tail_damage(&self) -> Option<u64> {
        self.damage
    }

    fn repair_tail(&mut self) -> Result<(), LedgerError> {
        let Some(from) = self.damage else { return Ok(()) };
        let keep_segment = from / SEGMENT_BLOCKS;
        // Drop whole segments past the damage, then truncate within the
        // segment holding it.
        for segment in keep_segment + 1.. {
            let path = self.segment_path(segment);
            if !path.exists() {
                break;
            }
            std::fs::remove_file(&path)?;
        }
        let path = self.segment_path(keep_segment);
        if path.exists() {
            let keep_bytes = if from % SEGMENT_BLOCKS == 0 && from == keep_segment * SEGMENT_BLOCKS {
                // Damage starts at the segment's first record (or its
                // header); drop the file entirely unless it holds earlier
                // intact records.
                if self.index.last().map(|(s, ..)| *s) == Some(keep_segment) {
                    let (_, off, len) = *self.index.last().unwrap();
                    off + u64::from(len)
                } else {
                    0
                }
            } else {
                let (_, off, len) = self.index[(from - 1) as usize];
                off + u64::from(len)
            };
            if keep_bytes == 0 {
                std::fs::remove_file(&path)?;
            } else {
                let file = OpenOptions::new().write(true).open(&path)?;
                file.set_len(keep_bytes)?;
                file.sync_data()?;
            }
        }
        self.damage = None;
        Ok(())
    }
}

/// Outcome of a full-chain verification walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyOutcome {
    /// Every block re-hashed cleanly; the chain has this many blocks.
    Intact { blocks: u64 },
    /// The first inconsistency, with what failed.
    Corrupt { height: u64, reason: String },
}

/// One historical write touching a key, as reconstructed from the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub height: u64,
    pub tx_index: u32,
    pub tx_id: Hash,
    pub tx_type: TxType,
    pub timestamp: i64,
    pub key: StateKey,
    pub value: WriteValue,
}

/// Walk a store's whole chain from raw bytes, recomputing transaction ids,
/// data hashes, and header linkage. Never repairs anything: an unreadable
/// region is reported as corruption at the height where it begins.
pub fn verify_store(store: &dyn BlockStore) -> VerifyOutcome {
    let mut previous_hash = ZERO_HASH;
    for height in 0..store.next_height() {
        let raw = match store.read_raw(height) {
            Ok(raw) => raw,
            Err(e) => return VerifyOutcome::Corrupt { height, reason: e.to_string() },
        };
        let block = match Block::decode(&raw) {
            Ok(block) => block,
            Err(e) => {
                return VerifyOutcome::Corrupt { height, reason: format!("undecodable block: {e}") }
            }
        };
        if block.header.height != height {
            return VerifyOutcome::Corrupt {
                height,
                reason: format!("header claims height {}", block.header.height),
            };
        }
        if block.header.previous_hash != previous_hash {
            return VerifyOutcome::Corrupt { height, reason: "previous-hash link broken".into() };
        }
        for (i, tx) in block.txs.iter().enumerate() {
            if crypto::sha256(&tx.body_bytes()) != tx.tx_id {
                return VerifyOutcome::Corrupt {
                    height,
                    reason: format!("transaction {i} id does not match its content"),
                };
            }
        }
        if data_hash(&block.txs, &block.validity) != block.header.data_hash {
            return VerifyOutcome::Corrupt { height, reason: "data hash mismatch".into() };
        }
        previous_hash = block.header.hash();
    }
    if let Some(height) = store.tail_damage() {
        return VerifyOutcome::Corrupt { height, reason: "unreadable trailing region".into() };
    }
    VerifyOutcome::Intact { blocks: store.next_height() }
}

/// The chain plus its append cursor.
pub struct Ledger {
    store: Box<dyn BlockStore>,
    tip: (u64, Hash),
}

impl Ledger {
    /// Open a store for appending, writing the genesis block if it is
    /// empty. A damaged tail from a crash mid-append is discarded here: the
    /// block never committed. Integrity checking uses [`verify_store`] on a
    /// freshly opened store instead, which repairs nothing.
    pub fn open(mut store: Box<dyn BlockStore>) -> Result<Self, LedgerError> {
        if store.tail_damage().is_some() && store.next_height() > 0 {
            store.repair_tail()?;
        }
        if store.next_height() == 0 {
            store.repair_tail()?;
            let genesis = Block::genesis();
            store.append_raw(0, &genesis.encode())?;
            return Ok(Self { tip: (0, genesis.header.hash()), store });
        }
        let last = store.next_height() - 1;
        let block = Block::decode(&store.read_raw(last)?)?;
        Ok(Self { tip: (last, block.header.hash()), store })
    }

    /// Height of the newest block.
    pub fn height(&self) -> u64 {
        self.tip.0
    }

    /// Raw access to the underlying block storage, for verification walks
    /// that work from bytes.
    pub fn store(&self) -> &dyn BlockStore {
        self.store.as_ref()
    }

    /// Form, persist, and return the next block.
    pub fn append(&mut self, txs: Vec<Transaction>, validity: Vec<bool>) -> Result<Block, LedgerError> {
        let height = self.tip.0 + 1;
        let block = Block::build(height, self.tip.1, txs, validity);
        self.store.append_raw(height, &block.encode())?;
        self.tip = (height, block.header.hash());
        Ok(block)
    }

    pub fn block(&self, height: u64) -> Result<Block, LedgerError> {
        Ok(Block::decode(&self.store.read_raw(height)?)?)
    }

    /// Walk the whole chain from raw bytes, recomputing transaction ids,
    /// data hashes, and header linkage.
    pub fn verify(&self) -> VerifyOutcome {
        verify_store(self.store.as_ref())
    }

    /// Every committed (Valid) write whose key matches `predicate`, oldest
    /// first, with decision placeholder keys expanded to their final form.
    pub fn history<F>(&self, predicate: F) -> Result<Vec<HistoryEntry>, LedgerError>
    where
        F: Fn(&StateKey) -> bool,
    {
        let mut entries = Vec::new();
        for height in 1..=self.height() {
            let block = self.block(height)?;
            for (i, tx) in block.txs.iter().enumerate() {
                if !block.validity[i] {
                    continue;
                }
                for (key, value) in &tx.rwset.writes {
                    let expanded = crate::state::expand_decision_key(key, height, i as u32);
                    if predicate(&expanded) {
                        entries.push(HistoryEntry {
                            height,
                            tx_index: i as u32,
                            tx_id: tx.tx_id,
                            tx_type: tx.tx_type,
                            timestamp: tx.timestamp,
                            key: expanded,
                            value: value.clone(),
                        });
                    }
                }
            }
        }
        Ok(entries)
    }

    /// History of one exact key.
    pub fn key_history(&self, key: &StateKey) -> Result<Vec<HistoryEntry>, LedgerError> {
        self.history(|k| k == key)
    }

    /// All decision records for one object, in commit order.
    pub fn decision_records(&self, object_id: &str) -> Result<Vec<HistoryEntry>, LedgerError> {
        let prefix = format!("{object_id}:");
        self.history(|k| {
            k.namespace == crate::state::Namespace::Decision && k.id.starts_with(&prefix)
        })
    }
}
